#include "octa/forest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "octa/csv.hpp"
#include "octa/errors.hpp"
#include "octa/rng.hpp"

namespace octa::forest {
namespace {

double gini(const std::vector<long>& counts, long total) {
  if (total == 0) return 0.0;
  double g = 1.0;
  for (const long c : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    g -= p * p;
  }
  return g;
}

int leaf_class(const TreeNode& node) {
  int best = 0;
  for (std::size_t k = 1; k < node.class_counts.size(); ++k)
    if (node.class_counts[k] > node.class_counts[best]) best = static_cast<int>(k);
  return best;
}

struct TreeBuilder {
  const FeatureTable& table;
  Tree& tree;
  Rng& rng;
  int mtry;
  long n_bootstrap;

  int build(const std::vector<int>& rows) {
    const int n_classes = table.n_classes();
    TreeNode node;
    node.class_counts.assign(n_classes, 0.0f);
    std::vector<long> counts(n_classes, 0);
    for (const int r : rows) ++counts[table.y[r]];
    for (int k = 0; k < n_classes; ++k)
      node.class_counts[k] = static_cast<float>(counts[k]);

    const long total = static_cast<long>(rows.size());
    const double node_gini = gini(counts, total);
    const int node_index = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(node);

    if (node_gini == 0.0 || total < 2) return node_index;

    // Random feature subset, then the best midpoint split by Gini decrease.
    const auto candidates = rng.sample_indices(table.n_features(), mtry);
    int best_feature = -1;
    float best_threshold = 0;
    double best_gain = 0;
    std::vector<int> order(rows);
    for (const int f : candidates) {
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return table.X(a, f) < table.X(b, f);
      });
      std::vector<long> left(n_classes, 0);
      long n_left = 0;
      for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        ++left[table.y[order[i]]];
        ++n_left;
        const float v = table.X(order[i], f);
        const float next = table.X(order[i + 1], f);
        if (v == next) continue;
        std::vector<long> right(n_classes, 0);
        for (int k = 0; k < n_classes; ++k) right[k] = counts[k] - left[k];
        const long n_right = total - n_left;
        const double gain =
            node_gini - (static_cast<double>(n_left) / total) * gini(left, n_left) -
            (static_cast<double>(n_right) / total) * gini(right, n_right);
        if (gain > best_gain + 1e-12) {
          best_gain = gain;
          best_feature = f;
          best_threshold = 0.5f * (v + next);
        }
      }
    }
    if (best_feature < 0) return node_index;  // no improving split

    std::vector<int> left_rows, right_rows;
    for (const int r : rows) {
      if (table.X(r, best_feature) <= best_threshold)
        left_rows.push_back(r);
      else
        right_rows.push_back(r);
    }
    if (left_rows.empty() || right_rows.empty()) return node_index;

    tree.nodes[node_index].feature = best_feature;
    tree.nodes[node_index].threshold = best_threshold;
    tree.nodes[node_index].gini_gain = static_cast<float>(
        best_gain * static_cast<double>(total) / static_cast<double>(n_bootstrap));
    const int left_index = build(left_rows);
    tree.nodes[node_index].left = left_index;
    const int right_index = build(right_rows);
    tree.nodes[node_index].right = right_index;
    return node_index;
  }
};

}  // namespace

void FeatureTable::validate() const {
  if (X.rows() != static_cast<Eigen::Index>(y.size()))
    throw ShapeError("feature rows and labels differ in length");
  if (feature_names.size() != static_cast<std::size_t>(X.cols()))
    throw ShapeError("feature names do not match the feature count");
  for (const int label : y)
    if (label < 0 || label >= n_classes())
      throw ValueError("label index out of range");
}

ForestModel fit_forest(const FeatureTable& table, int n_trees, std::uint64_t seed) {
  table.validate();
  if (n_trees < 1) throw ValueError("need at least one tree");
  std::set<int> present(table.y.begin(), table.y.end());
  if (present.size() < 2)
    throw ValueError("cannot grow a forest on a single class");

  ForestModel model;
  model.feature_names = table.feature_names;
  model.class_names = table.class_names;
  model.seed = seed;

  const int n = table.n_rows();
  const int mtry = static_cast<int>(
      std::ceil(std::sqrt(static_cast<double>(table.n_features()))));

  for (int t = 0; t < n_trees; ++t) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(t)));
    std::vector<int> bootstrap(n);
    std::vector<bool> drawn(n, false);
    for (int i = 0; i < n; ++i) {
      bootstrap[i] = static_cast<int>(rng.uniform_int(n));
      drawn[bootstrap[i]] = true;
    }
    Tree tree;
    for (int i = 0; i < n; ++i)
      if (!drawn[i]) tree.oob_rows.push_back(i);
    TreeBuilder builder{table, tree, rng, mtry, n};
    builder.build(bootstrap);
    model.trees.push_back(std::move(tree));
  }
  return model;
}

int predict_tree(const Tree& tree, const Eigen::VectorXf& row) {
  int at = 0;
  for (;;) {
    const TreeNode& node = tree.nodes[at];
    if (node.feature < 0) return leaf_class(node);
    if (node.feature >= row.size()) throw ShapeError("feature row too short");
    at = row[node.feature] <= node.threshold ? node.left : node.right;
  }
}

Prediction predict(const ForestModel& model, const Eigen::VectorXf& row) {
  if (model.trees.empty()) throw ValueError("empty forest");
  if (row.size() != static_cast<Eigen::Index>(model.feature_names.size()))
    throw ShapeError("feature row has " + std::to_string(row.size()) +
                     " entries, expected " +
                     std::to_string(model.feature_names.size()));
  Prediction out;
  out.votes.assign(model.n_classes(), 0.0);
  for (const auto& tree : model.trees)
    out.votes[predict_tree(tree, row)] += 1.0;
  for (auto& v : out.votes) v /= model.n_trees();
  out.cls = 0;
  for (int k = 1; k < model.n_classes(); ++k)
    if (out.votes[k] > out.votes[out.cls]) out.cls = k;
  return out;
}

ImportanceReport permutation_importance(const ForestModel& model,
                                        const FeatureTable& table) {
  table.validate();
  const int p = static_cast<int>(model.feature_names.size());
  const int n_classes = model.n_classes();
  ImportanceReport report;
  report.overall_mda = Eigen::VectorXd::Zero(p);
  report.class_mda_signed = Eigen::MatrixXd::Zero(p, n_classes);

  Eigen::MatrixXd mda_class = Eigen::MatrixXd::Zero(p, n_classes);
  Eigen::VectorXd trees_overall = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd trees_class = Eigen::MatrixXd::Zero(p, n_classes);

  for (std::size_t t = 0; t < model.trees.size(); ++t) {
    const Tree& tree = model.trees[t];
    const auto& oob = tree.oob_rows;
    if (oob.empty()) continue;

    std::vector<int> base_pred(oob.size());
    for (std::size_t i = 0; i < oob.size(); ++i)
      base_pred[i] = predict_tree(tree, table.X.row(oob[i]));

    std::vector<long> class_total(n_classes, 0), class_correct(n_classes, 0);
    long correct = 0;
    for (std::size_t i = 0; i < oob.size(); ++i) {
      const int truth = table.y[oob[i]];
      ++class_total[truth];
      if (base_pred[i] == truth) {
        ++correct;
        ++class_correct[truth];
      }
    }

    for (int f = 0; f < p; ++f) {
      Rng rng(Rng::derive(Rng::derive(model.seed, "mda"),
                          t * static_cast<std::uint64_t>(p) + f));
      std::vector<int> perm(oob.size());
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(perm.begin(), perm.end());

      long perm_correct = 0;
      std::vector<long> perm_class_correct(n_classes, 0);
      Eigen::VectorXf row;
      for (std::size_t i = 0; i < oob.size(); ++i) {
        row = table.X.row(oob[i]);
        row[f] = table.X(oob[perm[i]], f);
        const int pred = predict_tree(tree, row);
        const int truth = table.y[oob[i]];
        if (pred == truth) {
          ++perm_correct;
          ++perm_class_correct[truth];
        }
      }
      const double drop = static_cast<double>(correct - perm_correct) /
                          static_cast<double>(oob.size());
      report.overall_mda[f] += drop;
      trees_overall[f] += 1.0;
      for (int k = 0; k < n_classes; ++k) {
        if (class_total[k] == 0) continue;
        mda_class(f, k) += static_cast<double>(class_correct[k] - perm_class_correct[k]) /
                           static_cast<double>(class_total[k]);
        trees_class(f, k) += 1.0;
      }
    }
  }

  for (int f = 0; f < p; ++f) {
    if (trees_overall[f] > 0) report.overall_mda[f] /= trees_overall[f];
    for (int k = 0; k < n_classes; ++k)
      if (trees_class(f, k) > 0) mda_class(f, k) /= trees_class(f, k);
  }

  // Sign each class score by the feature trend: higher inside the class than
  // outside reads as a positive predictor.
  for (int f = 0; f < p; ++f) {
    for (int k = 0; k < n_classes; ++k) {
      double in_sum = 0, out_sum = 0;
      long in_n = 0, out_n = 0;
      for (int r = 0; r < table.n_rows(); ++r) {
        if (table.y[r] == k) {
          in_sum += table.X(r, f);
          ++in_n;
        } else {
          out_sum += table.X(r, f);
          ++out_n;
        }
      }
      const double in_mean = in_n ? in_sum / in_n : 0;
      const double out_mean = out_n ? out_sum / out_n : 0;
      const double sign = in_mean > out_mean ? 1.0 : -1.0;
      report.class_mda_signed(f, k) = sign * std::abs(mda_class(f, k));
    }
  }
  return report;
}

Eigen::VectorXd gini_importance(const ForestModel& model) {
  const int p = static_cast<int>(model.feature_names.size());
  Eigen::VectorXd importance = Eigen::VectorXd::Zero(p);
  for (const auto& tree : model.trees)
    for (const auto& node : tree.nodes)
      if (node.feature >= 0) importance[node.feature] += node.gini_gain;
  if (!model.trees.empty()) importance /= static_cast<double>(model.n_trees());
  return importance;
}

Eigen::VectorXf cluster_volume_features(const std::vector<int>& sp_cluster,
                                        const std::vector<long long>& sp_pixels,
                                        int n_clusters,
                                        const std::array<double, 3>& spacing_um,
                                        bool binary_mode) {
  if (sp_cluster.size() != sp_pixels.size())
    throw ShapeError("cluster assignments and pixel counts differ in length");
  const double voxel = spacing_um[0] * spacing_um[1] * spacing_um[2];
  Eigen::VectorXf features = Eigen::VectorXf::Zero(binary_mode ? 1 : n_clusters);
  for (std::size_t i = 0; i < sp_cluster.size(); ++i) {
    const int c = sp_cluster[i];
    if (c < 0) continue;  // normal superpixel
    if (c >= n_clusters) throw ValueError("cluster index out of range");
    features[binary_mode ? 0 : c] +=
        static_cast<float>(static_cast<double>(sp_pixels[i]) * voxel);
  }
  return features;
}

namespace {

std::string join_names(const std::vector<std::string>& names) {
  std::string out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out.push_back('|');
    out += names[i];
  }
  return out;
}

std::vector<std::string> split_names(const std::string& joined) {
  std::vector<std::string> out;
  std::string cur;
  for (const char c : joined) {
    if (c == '|') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

io::ModelContainer to_container(const ForestModel& m) {
  io::ModelContainer c;
  c.kind = "forest";
  c.attrs["n_trees"] = std::to_string(m.n_trees());
  c.attrs["seed"] = std::to_string(m.seed);
  c.attrs["classes"] = join_names(m.class_names);
  c.attrs["features"] = join_names(m.feature_names);
  const int n_classes = m.n_classes();
  for (int t = 0; t < m.n_trees(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "tree_%04d", t);
    const auto& tree = m.trees[t];
    Eigen::MatrixXf enc(tree.nodes.size(), 5 + n_classes);
    for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
      const auto& node = tree.nodes[i];
      enc(i, 0) = static_cast<float>(node.feature);
      enc(i, 1) = node.threshold;
      enc(i, 2) = static_cast<float>(node.left);
      enc(i, 3) = static_cast<float>(node.right);
      enc(i, 4) = node.gini_gain;
      for (int k = 0; k < n_classes; ++k) enc(i, 5 + k) = node.class_counts[k];
    }
    c.matrices[name] = std::move(enc);
    std::snprintf(name, sizeof(name), "oob_%04d", t);
    Eigen::MatrixXf oob(1, std::max<std::size_t>(tree.oob_rows.size(), 1));
    oob.setConstant(-1.0f);
    for (std::size_t i = 0; i < tree.oob_rows.size(); ++i)
      oob(0, i) = static_cast<float>(tree.oob_rows[i]);
    c.matrices[name] = std::move(oob);
  }
  return c;
}

ForestModel forest_from_container(const io::ModelContainer& c) {
  if (c.kind != "forest")
    throw FormatError("expected a forest container, found '" + c.kind + "'");
  ForestModel m;
  m.seed = static_cast<std::uint64_t>(std::stoull(c.attr("seed")));
  m.class_names = split_names(c.attr("classes"));
  m.feature_names = split_names(c.attr("features"));
  const int n_trees = static_cast<int>(c.attr_int("n_trees"));
  const int n_classes = static_cast<int>(m.class_names.size());
  for (int t = 0; t < n_trees; ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "tree_%04d", t);
    const Eigen::MatrixXf& enc = c.matrix(name);
    if (enc.cols() != 5 + n_classes)
      throw FormatError("tree matrix has unexpected width");
    Tree tree;
    for (Eigen::Index i = 0; i < enc.rows(); ++i) {
      TreeNode node;
      node.feature = static_cast<int>(enc(i, 0));
      node.threshold = enc(i, 1);
      node.left = static_cast<int>(enc(i, 2));
      node.right = static_cast<int>(enc(i, 3));
      node.gini_gain = enc(i, 4);
      node.class_counts.resize(n_classes);
      for (int k = 0; k < n_classes; ++k) node.class_counts[k] = enc(i, 5 + k);
      tree.nodes.push_back(std::move(node));
    }
    std::snprintf(name, sizeof(name), "oob_%04d", t);
    const Eigen::MatrixXf& oob = c.matrix(name);
    for (Eigen::Index i = 0; i < oob.cols(); ++i)
      if (oob(0, i) >= 0) tree.oob_rows.push_back(static_cast<int>(oob(0, i)));
    m.trees.push_back(std::move(tree));
  }
  return m;
}

}  // namespace octa::forest
