#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sg::io {

// Minimal 8-bit PNG writer (zlib-compressed). `rgb` is H*W*3 row-major,
// `gray` is H*W; values are clamped from [0,1] floats by the callers.
void write_png_rgb(const std::filesystem::path& path, int width, int height,
                   const std::vector<uint8_t>& rgb);
void write_png_gray(const std::filesystem::path& path, int width, int height,
                    const std::vector<uint8_t>& gray);

std::vector<uint8_t> quantize_u8(const std::vector<float>& v);

} // namespace sg::io
