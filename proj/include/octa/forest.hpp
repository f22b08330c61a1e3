#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "octa/model_container.hpp"

namespace octa::forest {

/// Per-volume rows of nonnegative features (cluster volumes in cubic
/// micrometers) with class labels.
struct FeatureTable {
  Eigen::MatrixXf X;
  std::vector<int> y;  // indices into class_names
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;

  int n_rows() const { return static_cast<int>(X.rows()); }
  int n_features() const { return static_cast<int>(X.cols()); }
  int n_classes() const { return static_cast<int>(class_names.size()); }
  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  float threshold = 0;
  int left = -1, right = -1;
  float gini_gain = 0;               // split nodes: weighted impurity decrease
  std::vector<float> class_counts;   // training samples that reached the node
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  std::vector<int> oob_rows;    // training rows left out of the bootstrap
};

struct ForestModel {
  std::vector<Tree> trees;
  std::vector<std::string> feature_names;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;

  int n_trees() const { return static_cast<int>(trees.size()); }
  int n_classes() const { return static_cast<int>(class_names.size()); }
};

/// Bagged CART trees: Gini impurity, ceil(sqrt(p)) candidate features per
/// split, grown until pure or unsplittable, one bootstrap per tree.
/// Deterministic under seed. Throws on single-class input.
ForestModel fit_forest(const FeatureTable& table, int n_trees, std::uint64_t seed);

struct Prediction {
  int cls = 0;
  std::vector<double> votes;  // per class, sums to 1
};

Prediction predict(const ForestModel& model, const Eigen::VectorXf& row);

/// Classes traversed by a single tree, for oracle tests.
int predict_tree(const Tree& tree, const Eigen::VectorXf& row);

struct ImportanceReport {
  Eigen::MatrixXd class_mda_signed;  // n_features x n_classes, sign x |MDA|
  Eigen::VectorXd overall_mda;       // n_features
};

/// Mean decrease of accuracy under out-of-bag permutation of each feature,
/// overall and per class (accuracy restricted to rows of that class). The
/// class-specific scores are signed by the feature trend: positive when the
/// feature runs higher inside the class than outside.
ImportanceReport permutation_importance(const ForestModel& model,
                                        const FeatureTable& table);

/// Mean over trees of the summed, node-weighted Gini impurity decreases of
/// every split on each feature. Features never used split to exactly 0.
Eigen::VectorXd gini_importance(const ForestModel& model);

/// Physical per-cluster anomaly volumes of one scan: feature j accumulates
/// the pixels of superpixels assigned to cluster j times the voxel volume.
/// sp_cluster holds -1 for normal superpixels. In binary mode the single
/// feature is the total anomalous volume, ignoring cluster identity.
Eigen::VectorXf cluster_volume_features(const std::vector<int>& sp_cluster,
                                        const std::vector<long long>& sp_pixels,
                                        int n_clusters,
                                        const std::array<double, 3>& spacing_um,
                                        bool binary_mode = false);

io::ModelContainer to_container(const ForestModel& m);
ForestModel forest_from_container(const io::ModelContainer& c);

}  // namespace octa::forest
