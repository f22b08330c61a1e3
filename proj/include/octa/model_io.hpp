#pragma once

#include <filesystem>
#include <variant>

#include "octa/cluster.hpp"
#include "octa/features.hpp"
#include "octa/forest.hpp"
#include "octa/neuralnet.hpp"
#include "octa/ocsvm.hpp"

namespace octa::io {

/// Writes any trained model in the OCTM container format.
template <typename Model>
void save_model(const Model& model, const std::filesystem::path& path) {
  to_container(model).save(path);
}

inline void save_model(const feat::PcaModel& model, const std::filesystem::path& path) {
  model.to_container().save(path);
}

using AnyModel = std::variant<nn::DenseStack<float>, nn::CompositeEncoder<float>,
                              feat::PcaModel, svm::OcsvmModel, cluster::ClusterModel,
                              forest::ForestModel>;

/// Loads whichever model kind the container declares.
inline AnyModel load_model(const std::filesystem::path& path) {
  const ModelContainer c = ModelContainer::load(path);
  if (c.kind == "ddae_stack") return nn::stack_from_container(c);
  if (c.kind == "ddae_ent") return nn::composite_from_container(c);
  if (c.kind == "pca") return feat::pca_from_container(c);
  if (c.kind == "ocsvm") return svm::ocsvm_from_container(c);
  if (c.kind == "cluster") return cluster::cluster_from_container(c);
  if (c.kind == "forest") return forest::forest_from_container(c);
  throw FormatError("unknown model kind '" + c.kind + "' in '" + path.string() + "'");
}

template <typename Model>
Model load_model_as(const std::filesystem::path& path) {
  AnyModel any = load_model(path);
  if (auto* m = std::get_if<Model>(&any)) return std::move(*m);
  throw FormatError("'" + path.string() + "' holds a different model kind");
}

}  // namespace octa::io
