#include "octa/features.hpp"

#include <Eigen/Eigenvalues>

namespace octa::feat {
namespace {

// Symmetric (mirror-including-edge) fold of an index into [0, n).
int reflect(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

}  // namespace

PatchPair extract_patch_pair(const NormalizedBScan& bscan, int row, int col) {
  const int w = bscan.width(), h = bscan.height();
  if (w < 2 || h < 2) throw ShapeError("B-scan too small for patch extraction");

  PatchPair out;
  out.row = row;
  out.col = col;
  out.slice = bscan.slice;
  out.volume_id = bscan.volume_id;
  out.small.resize(kPatchSize * kPatchSize);
  out.large_ds.resize(kPatchSize * kPatchSize);

  const int half = kPatchSize / 2;
  for (int r = 0; r < kPatchSize; ++r) {
    const int src_r = reflect(row - half + r, h);
    for (int c = 0; c < kPatchSize; ++c) {
      const int src_c = reflect(col - half + c, w);
      out.small[r * kPatchSize + c] = bscan.pixels.at(src_r, src_c);
    }
  }

  const int large_half = kLargeWidth / 2;
  for (int r = 0; r < kPatchSize; ++r) {
    const int src_r = reflect(row - half + r, h);
    for (int c = 0; c < kPatchSize; ++c) {
      // 4x1 horizontal box average of the wide window.
      float sum = 0;
      for (int i = 0; i < 4; ++i) {
        const int src_c = reflect(col - large_half + 4 * c + i, w);
        sum += bscan.pixels.at(src_r, src_c);
      }
      out.large_ds[r * kPatchSize + c] = sum * 0.25f;
    }
  }
  return out;
}

Eigen::MatrixXf patch_matrix(const std::vector<PatchPair>& pairs, bool small_scale) {
  const int d = kPatchSize * kPatchSize;
  Eigen::MatrixXf m(static_cast<Eigen::Index>(pairs.size()), d);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& v = small_scale ? pairs[i].small : pairs[i].large_ds;
    if (v.size() != d) throw ShapeError("malformed patch in batch");
    m.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return m;
}

Eigen::MatrixXf embed_dataset(const Embedder& embedder,
                              const std::vector<PatchPair>& pairs) {
  // One sample at a time: batched float GEMM kernels round differently
  // depending on a row's position in the batch, which would break the
  // contract that row i equals the stand-alone embedding of pair i.
  Eigen::MatrixXf Z(static_cast<Eigen::Index>(pairs.size()), embedder.dim());
  Eigen::MatrixXf small(1, kPatchSize * kPatchSize), large(1, kPatchSize * kPatchSize);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].small.size() != small.cols() ||
        pairs[i].large_ds.size() != large.cols())
      throw ShapeError("malformed patch in batch");
    small.row(0) = pairs[i].small.transpose();
    large.row(0) = pairs[i].large_ds.transpose();
    Z.row(static_cast<Eigen::Index>(i)) = embedder.embed(small, large).row(0);
  }
  return Z;
}

namespace {

struct ScalePca {
  Eigen::MatrixXd components;  // full orthonormal basis, descending eigenvalue
  Eigen::VectorXd mean;
  Eigen::VectorXd eigenvalues;
};

ScalePca fit_scale(const Eigen::MatrixXf& patches) {
  const Eigen::Index n = patches.rows(), d = patches.cols();
  if (n < 2) throw ValueError("PCA needs at least two samples");

  ScalePca out;
  out.mean = patches.colwise().mean().transpose().cast<double>();
  Eigen::MatrixXf centered = patches;
  centered.rowwise() -= out.mean.cast<float>().transpose();
  const Eigen::MatrixXd cov =
      (centered.transpose() * centered).cast<double>() / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success)
    throw ConvergenceError("covariance eigendecomposition failed");

  // Eigen returns ascending order; flip to descending.
  out.components.resize(d, d);
  out.eigenvalues.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    out.components.col(i) = solver.eigenvectors().col(d - 1 - i);
    out.eigenvalues[i] = std::max(0.0, solver.eigenvalues()[d - 1 - i]);
  }
  return out;
}

int pick_k(const ScalePca& pca, PcaModel::Mode mode, int fixed_k,
           double variance_fraction, bool* rank_deficient) {
  const auto d = static_cast<int>(pca.eigenvalues.size());
  if (mode == PcaModel::Mode::FixedK) {
    if (fixed_k < 1 || fixed_k > d)
      throw ValueError("fixed component count must lie in [1, dim]");
    int rank = 0;
    const double tol = pca.eigenvalues[0] * 1e-12;
    for (int i = 0; i < d; ++i)
      if (pca.eigenvalues[i] > tol) ++rank;
    if (rank < fixed_k) *rank_deficient = true;  // zero-variance padding
    return fixed_k;
  }
  const double total = pca.eigenvalues.sum();
  if (total <= 0) return 1;
  double acc = 0;
  for (int i = 0; i < d; ++i) {
    acc += pca.eigenvalues[i];
    if (acc / total >= variance_fraction) return i + 1;
  }
  return d;
}

}  // namespace

PcaModel pca_fit(const Eigen::MatrixXf& small_patches,
                 const Eigen::MatrixXf& large_patches, PcaModel::Mode mode,
                 int fixed_k, double variance_fraction) {
  if (small_patches.rows() != large_patches.rows())
    throw ShapeError("scale sample counts differ");
  PcaModel model;
  model.mode = mode;

  const ScalePca ps = fit_scale(small_patches);
  const ScalePca pl = fit_scale(large_patches);
  const int ks = pick_k(ps, mode, fixed_k, variance_fraction, &model.rank_deficient);
  const int kl = pick_k(pl, mode, fixed_k, variance_fraction, &model.rank_deficient);

  model.components_small = ps.components.leftCols(ks);
  model.components_large = pl.components.leftCols(kl);
  model.mean_small = ps.mean;
  model.mean_large = pl.mean;
  model.eigenvalues_small = ps.eigenvalues;
  model.eigenvalues_large = pl.eigenvalues;
  return model;
}

Eigen::MatrixXf PcaModel::embed(const Eigen::MatrixXf& small,
                                const Eigen::MatrixXf& large) const {
  if (small.cols() != mean_small.size() || large.cols() != mean_large.size())
    throw ShapeError("patch width does not match the PCA model");
  if (small.rows() != large.rows()) throw ShapeError("scale batches differ in rows");
  Eigen::MatrixXd cs = small.cast<double>();
  cs.rowwise() -= mean_small.transpose();
  Eigen::MatrixXd cl = large.cast<double>();
  cl.rowwise() -= mean_large.transpose();
  Eigen::MatrixXf out(small.rows(), dim());
  out << (cs * components_small).cast<float>(), (cl * components_large).cast<float>();
  return out;
}

io::ModelContainer PcaModel::to_container() const {
  io::ModelContainer c;
  c.kind = "pca";
  c.attrs["mode"] = mode == Mode::FixedK ? "fixed" : "variance";
  c.attrs["rank_deficient"] = rank_deficient ? "1" : "0";
  c.matrices["components_small"] = components_small.cast<float>();
  c.matrices["components_large"] = components_large.cast<float>();
  c.matrices["mean_small"] = mean_small.cast<float>();
  c.matrices["mean_large"] = mean_large.cast<float>();
  c.matrices["eigenvalues_small"] = eigenvalues_small.cast<float>();
  c.matrices["eigenvalues_large"] = eigenvalues_large.cast<float>();
  return c;
}

PcaModel pca_from_container(const io::ModelContainer& c) {
  if (c.kind != "pca")
    throw FormatError("expected a pca container, found '" + c.kind + "'");
  PcaModel m;
  m.mode = c.attr("mode") == "fixed" ? PcaModel::Mode::FixedK
                                     : PcaModel::Mode::VarianceFraction;
  m.rank_deficient = c.attr("rank_deficient") == "1";
  m.components_small = c.matrix("components_small").cast<double>();
  m.components_large = c.matrix("components_large").cast<double>();
  m.mean_small = c.matrix("mean_small").col(0).cast<double>();
  m.mean_large = c.matrix("mean_large").col(0).cast<double>();
  m.eigenvalues_small = c.matrix("eigenvalues_small").col(0).cast<double>();
  m.eigenvalues_large = c.matrix("eigenvalues_large").col(0).cast<double>();
  return m;
}

std::unique_ptr<Embedder> load_embedder(const std::filesystem::path& path) {
  const io::ModelContainer c = io::ModelContainer::load(path);
  if (c.kind == "ddae_ent") {
    auto e = std::make_unique<DdaeEmbedder>();
    e->encoder = nn::composite_from_container(c);
    return e;
  }
  if (c.kind == "pca") return std::make_unique<PcaModel>(pca_from_container(c));
  throw FormatError("'" + path.string() + "' does not hold an embedding model (kind '" +
                    c.kind + "')");
}

}  // namespace octa::feat
