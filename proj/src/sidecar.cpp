#include "octa/sidecar.hpp"

#include <fstream>

#include "octa/errors.hpp"

namespace octa::io {
namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::map<std::string, std::string> read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open sidecar '" + path.string() + "'");
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError("sidecar '" + path.string() + "' line " +
                        std::to_string(lineno) + " is not 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw FormatError("sidecar '" + path.string() + "' line " +
                        std::to_string(lineno) + " has an empty key");
    out[key] = value;
  }
  return out;
}

void write_sidecar(const std::filesystem::path& path,
                   const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write sidecar '" + path.string() + "'");
  for (const auto& [k, v] : pairs) out << k << " = " << v << "\n";
  if (!out) throw FormatError("failed writing sidecar '" + path.string() + "'");
}

}  // namespace octa::io
