#include "octa/model_container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "octa/errors.hpp"

namespace octa::io {
namespace {

constexpr char kMagic[4] = {'O', 'C', 'T', 'M'};
constexpr std::uint32_t kEndMarker = 0x4d54434f;  // "OCTM" reversed

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw FormatError(std::string("container truncated at ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const char* what) {
  const std::uint32_t n = get_u32(in, what);
  if (n > (1u << 24)) throw FormatError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (static_cast<std::uint32_t>(in.gcount()) != n)
    throw FormatError(std::string("container truncated at ") + what);
  return s;
}

}  // namespace

void ModelContainer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_string(out, kind);

  put_u32(out, static_cast<std::uint32_t>(attrs.size()));
  for (const auto& [k, v] : attrs) {
    put_string(out, k);
    put_string(out, v);
  }

  put_u32(out, static_cast<std::uint32_t>(matrices.size()));
  for (const auto& [name, m] : matrices) {
    put_string(out, name);
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    // Row-major on disk for language neutrality.
    std::vector<unsigned char> raw(static_cast<std::size_t>(m.size()) * 4);
    std::size_t off = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const auto bits = std::bit_cast<std::uint32_t>(m(r, c));
        raw[off++] = static_cast<unsigned char>(bits & 0xff);
        raw[off++] = static_cast<unsigned char>((bits >> 8) & 0xff);
        raw[off++] = static_cast<unsigned char>((bits >> 16) & 0xff);
        raw[off++] = static_cast<unsigned char>((bits >> 24) & 0xff);
      }
    }
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
  }
  put_u32(out, kEndMarker);
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

ModelContainer ModelContainer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");

  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("'" + path.string() + "' is not an OCTM container");
  const std::uint32_t version = get_u32(in, "version");
  if (version != kVersion)
    throw FormatError("unsupported container version " + std::to_string(version) +
                      " in '" + path.string() + "' (expected " +
                      std::to_string(kVersion) + ")");

  ModelContainer out;
  out.kind = get_string(in, "kind");

  const std::uint32_t n_attrs = get_u32(in, "attribute count");
  for (std::uint32_t i = 0; i < n_attrs; ++i) {
    std::string k = get_string(in, "attribute name");
    out.attrs[k] = get_string(in, "attribute value");
  }

  const std::uint32_t n_mats = get_u32(in, "matrix count");
  for (std::uint32_t i = 0; i < n_mats; ++i) {
    const std::string name = get_string(in, "matrix name");
    const std::uint32_t rows = get_u32(in, "matrix rows");
    const std::uint32_t cols = get_u32(in, "matrix cols");
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 31))
      throw FormatError("implausible matrix size in '" + path.string() + "'");
    Eigen::MatrixXf m(rows, cols);
    std::vector<unsigned char> raw(static_cast<std::size_t>(rows) * cols * 4);
    in.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
      throw FormatError("container truncated inside matrix '" + name + "'");
    std::size_t off = 0;
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) {
        const std::uint32_t bits = static_cast<std::uint32_t>(raw[off]) |
                                   (static_cast<std::uint32_t>(raw[off + 1]) << 8) |
                                   (static_cast<std::uint32_t>(raw[off + 2]) << 16) |
                                   (static_cast<std::uint32_t>(raw[off + 3]) << 24);
        off += 4;
        m(r, c) = std::bit_cast<float>(bits);
      }
    }
    out.matrices[name] = std::move(m);
  }

  if (get_u32(in, "end marker") != kEndMarker)
    throw FormatError("container end marker missing in '" + path.string() + "'");
  return out;
}

const Eigen::MatrixXf& ModelContainer::matrix(const std::string& name) const {
  const auto it = matrices.find(name);
  if (it == matrices.end())
    throw FormatError("container lacks matrix '" + name + "'");
  return it->second;
}

const std::string& ModelContainer::attr(const std::string& name) const {
  const auto it = attrs.find(name);
  if (it == attrs.end())
    throw FormatError("container lacks attribute '" + name + "'");
  return it->second;
}

double ModelContainer::attr_double(const std::string& name) const {
  return std::stod(attr(name));
}

long long ModelContainer::attr_int(const std::string& name) const {
  return std::stoll(attr(name));
}

}  // namespace octa::io
