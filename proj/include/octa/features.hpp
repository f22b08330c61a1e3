#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <memory>
#include <vector>

#include "octa/neuralnet.hpp"
#include "octa/types.hpp"

namespace octa::feat {

constexpr int kPatchSize = 32;   // both stored grids are 32x32
constexpr int kLargeWidth = 128; // wide patch before 4x1 downsampling

/// Two co-centered patches flattened row-major: the 32x32 window and the
/// 128x32 window reduced to 32x32 by horizontal 4-pixel box averaging.
struct PatchPair {
  Eigen::VectorXf small;     // 1024 values in [0, 1]
  Eigen::VectorXf large_ds;  // 1024 values in [0, 1]
  int row = 0, col = 0;      // center within the B-scan
  int slice = 0;
  std::string volume_id;
};

/// Extracts the patch pair centered at (row, col). Out-of-image coordinates
/// are mirror-padded, so every retinal center is feasible.
PatchPair extract_patch_pair(const NormalizedBScan& bscan, int row, int col);

/// Stacks one scale of a patch list into a samples-by-1024 matrix.
Eigen::MatrixXf patch_matrix(const std::vector<PatchPair>& pairs, bool small_scale);

/// Common interface of the trainable feature embeddings.
struct Embedder {
  virtual ~Embedder() = default;
  virtual int dim() const = 0;
  virtual Eigen::MatrixXf embed(const Eigen::MatrixXf& small,
                                const Eigen::MatrixXf& large) const = 0;
  virtual io::ModelContainer to_container() const = 0;
};

/// One 256-d row per patch pair, in input order.
Eigen::MatrixXf embed_dataset(const Embedder& embedder,
                              const std::vector<PatchPair>& pairs);

struct DdaeEmbedder final : Embedder {
  nn::CompositeEncoder<float> encoder;

  int dim() const override { return encoder.dim(); }
  Eigen::MatrixXf embed(const Eigen::MatrixXf& small,
                        const Eigen::MatrixXf& large) const override {
    return encoder.encode(small, large);
  }
  io::ModelContainer to_container() const override {
    return nn::to_container(encoder);
  }
};

/// Per-scale PCA baseline; the two scale projections are concatenated.
/// Fit runs in double precision via the covariance eigendecomposition.
struct PcaModel final : Embedder {
  enum class Mode { FixedK, VarianceFraction };

  Eigen::MatrixXd components_small;  // dim x k, orthonormal columns
  Eigen::MatrixXd components_large;
  Eigen::VectorXd mean_small, mean_large;
  Eigen::VectorXd eigenvalues_small, eigenvalues_large;  // descending, full spectrum
  Mode mode = Mode::FixedK;
  bool rank_deficient = false;  // FixedK asked for more components than the data rank

  int dim() const override {
    return static_cast<int>(components_small.cols() + components_large.cols());
  }
  Eigen::MatrixXf embed(const Eigen::MatrixXf& small,
                        const Eigen::MatrixXf& large) const override;
  io::ModelContainer to_container() const override;
};

/// mode FixedK keeps `fixed_k` components per scale (128 gives the 256-d
/// baseline); mode VarianceFraction keeps the smallest k per scale whose
/// cumulative explained variance reaches `variance_fraction`.
PcaModel pca_fit(const Eigen::MatrixXf& small_patches,
                 const Eigen::MatrixXf& large_patches, PcaModel::Mode mode,
                 int fixed_k = 128, double variance_fraction = 0.95);

PcaModel pca_from_container(const io::ModelContainer& c);

/// Reads any supported embedding container ("ddae_ent" or "pca").
std::unique_ptr<Embedder> load_embedder(const std::filesystem::path& path);

}  // namespace octa::feat
