#pragma once

#include <filesystem>

#include "octa/image.hpp"

namespace octa::io {

struct PgmImage {
  Image<std::uint16_t> pixels;
  int maxval = 255;
};

/// Binary (P5) PGM. 16-bit samples are big-endian on disk, per Netpbm.
PgmImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image<std::uint16_t>& img,
               int maxval);

/// Binary (P6) PPM, 8-bit; used for color overlays.
void write_ppm(const std::filesystem::path& path, const Image<Rgb>& img);

}  // namespace octa::io
