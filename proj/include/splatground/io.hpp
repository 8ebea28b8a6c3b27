#pragma once

// File formats shared by checkpoints, caches and the dataset layout:
//  - tensor container: <name>.bin flat little-endian payload plus a JSON
//    sidecar <name>.json {"name", "dtype", "shape"}
//  - binary little-endian PLY with float x y z r g b
// Parse failures carry byte offsets where available.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <splatground/tensor.hpp>

namespace sg::io {

struct ParseError : Error {
    using Error::Error;
};

enum class Dtype { F32, F64, U32 };

std::string dtype_name(Dtype d);
Dtype dtype_from_name(const std::string& s);
size_t dtype_size(Dtype d);

struct Blob {
    std::string name;
    Dtype dtype = Dtype::F32;
    Shape shape;
    std::vector<uint8_t> payload;

    int64_t numel() const { return shape_numel(shape); }
    std::vector<float> as_f32() const;
    std::vector<double> as_f64() const;
    std::vector<uint32_t> as_u32() const;

    static Blob f32(std::string name, Shape shape, const std::vector<float>& v);
    static Blob f64(std::string name, Shape shape, const std::vector<double>& v);
    static Blob u32(std::string name, Shape shape, const std::vector<uint32_t>& v);
};

// base path without extension; writes base.bin and base.json
void write_blob(const std::filesystem::path& base, const Blob& blob);
Blob read_blob(const std::filesystem::path& base);

// --- PLY point clouds (x y z red green blue, all float32) ---
struct PlyCloud {
    std::vector<std::array<float, 3>> points;
    std::vector<std::array<float, 3>> colors;
};
void write_ply(const std::filesystem::path& path, const PlyCloud& cloud);
PlyCloud read_ply(const std::filesystem::path& path);

// --- small helpers ---
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

} // namespace sg::io
