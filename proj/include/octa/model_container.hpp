#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <string>

namespace octa::io {

/// Versioned binary container for trained models and feature matrices.
///
/// Layout (all integers little-endian u32, floats little-endian f32):
///   magic "OCTM" | version | kind string | attribute table | matrix table
/// Strings are length-prefixed. Each matrix carries its name, rows and cols
/// followed by rows*cols row-major f32 values. A trailing end marker guards
/// against truncation.
struct ModelContainer {
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  std::map<std::string, std::string> attrs;
  std::map<std::string, Eigen::MatrixXf> matrices;

  void save(const std::filesystem::path& path) const;
  static ModelContainer load(const std::filesystem::path& path);

  const Eigen::MatrixXf& matrix(const std::string& name) const;
  const std::string& attr(const std::string& name) const;
  double attr_double(const std::string& name) const;
  long long attr_int(const std::string& name) const;
  bool has_matrix(const std::string& name) const { return matrices.count(name) > 0; }
};

}  // namespace octa::io
