#include "octa/pgm.hpp"

#include <fstream>

#include "octa/errors.hpp"

namespace octa::io {
namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
    } else if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#')
        tok.push_back(static_cast<char>(in.get()));
      return tok;
    }
  }
  throw FormatError("unexpected end of PGM header");
}

int parse_int(const std::string& tok, const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw FormatError(std::string("bad PGM ") + what + ": '" + tok + "'");
  }
}

}  // namespace

PgmImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");

  if (next_token(in) != "P5")
    throw FormatError("'" + path.string() + "' is not a binary PGM (P5)");
  const int width = parse_int(next_token(in), "width");
  const int height = parse_int(next_token(in), "height");
  const int maxval = parse_int(next_token(in), "maxval");
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535)
    throw FormatError("invalid PGM dimensions in '" + path.string() + "'");
  in.get();  // single whitespace after maxval

  PgmImage out;
  out.maxval = maxval;
  out.pixels = Image<std::uint16_t>(width, height);
  const std::size_t n = out.pixels.size();
  if (maxval < 256) {
    std::vector<unsigned char> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError("truncated PGM payload in '" + path.string() + "'");
    for (std::size_t i = 0; i < n; ++i) out.pixels.data()[i] = raw[i];
  } else {
    std::vector<unsigned char> raw(n * 2);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
    if (static_cast<std::size_t>(in.gcount()) != n * 2)
      throw FormatError("truncated PGM payload in '" + path.string() + "'");
    for (std::size_t i = 0; i < n; ++i)
      out.pixels.data()[i] =
          static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image<std::uint16_t>& img,
               int maxval) {
  if (img.empty()) throw ValueError("refusing to write an empty PGM");
  if (maxval <= 0 || maxval > 65535)
    throw ValueError("PGM maxval out of range: " + std::to_string(maxval));
  for (const auto v : img.data())
    if (v > maxval)
      throw ValueError("pixel value " + std::to_string(v) +
                       " exceeds maxval " + std::to_string(maxval));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << "P5\n" << img.width() << " " << img.height() << "\n" << maxval << "\n";
  const std::size_t n = img.size();
  if (maxval < 256) {
    std::vector<unsigned char> raw(n);
    for (std::size_t i = 0; i < n; ++i)
      raw[i] = static_cast<unsigned char>(img.data()[i]);
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(n));
  } else {
    std::vector<unsigned char> raw(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
      raw[2 * i] = static_cast<unsigned char>(img.data()[i] >> 8);
      raw[2 * i + 1] = static_cast<unsigned char>(img.data()[i] & 0xff);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(n * 2));
  }
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

void write_ppm(const std::filesystem::path& path, const Image<Rgb>& img) {
  if (img.empty()) throw ValueError("refusing to write an empty PPM");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << "P6\n" << img.width() << " " << img.height() << "\n255\n";
  for (const auto& px : img.data()) {
    out.put(static_cast<char>(px.r));
    out.put(static_cast<char>(px.g));
    out.put(static_cast<char>(px.b));
  }
  if (!out) throw FormatError("failed writing '" + path.string() + "'");
}

}  // namespace octa::io
