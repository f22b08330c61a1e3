#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace octa::io {

/// Plain-text `key = value` sidecar files, UTF-8, one pair per line.
/// Lines starting with '#' are comments.
std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path);
void write_sidecar(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& pairs);

}  // namespace octa::io
