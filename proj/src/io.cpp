#include <splatground/io.hpp>

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace sg::io {

using nlohmann::json;

std::string dtype_name(Dtype d) {
    switch (d) {
    case Dtype::F32: return "f32";
    case Dtype::F64: return "f64";
    case Dtype::U32: return "u32";
    }
    throw Error("dtype_name: bad dtype");
}

Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::F32;
    if (s == "f64") return Dtype::F64;
    if (s == "u32") return Dtype::U32;
    throw ParseError("unknown dtype '" + s + "'");
}

size_t dtype_size(Dtype d) { return d == Dtype::F64 ? 8 : 4; }

namespace {
template <class T>
std::vector<T> reinterpret_payload(const Blob& b) {
    std::vector<T> out(b.payload.size() / sizeof(T));
    std::memcpy(out.data(), b.payload.data(), b.payload.size());
    return out;
}
template <class T>
std::vector<uint8_t> to_payload(const std::vector<T>& v) {
    std::vector<uint8_t> p(v.size() * sizeof(T));
    std::memcpy(p.data(), v.data(), p.size());
    return p;
}
} // namespace

std::vector<float> Blob::as_f32() const {
    op_check(dtype == Dtype::F32, "Blob::as_f32", "dtype is " + dtype_name(dtype));
    return reinterpret_payload<float>(*this);
}
std::vector<double> Blob::as_f64() const {
    op_check(dtype == Dtype::F64, "Blob::as_f64", "dtype is " + dtype_name(dtype));
    return reinterpret_payload<double>(*this);
}
std::vector<uint32_t> Blob::as_u32() const {
    op_check(dtype == Dtype::U32, "Blob::as_u32", "dtype is " + dtype_name(dtype));
    return reinterpret_payload<uint32_t>(*this);
}

Blob Blob::f32(std::string name, Shape shape, const std::vector<float>& v) {
    op_check(shape_numel(shape) == static_cast<int64_t>(v.size()), "Blob::f32", "shape/value mismatch");
    return Blob{std::move(name), Dtype::F32, std::move(shape), to_payload(v)};
}
Blob Blob::f64(std::string name, Shape shape, const std::vector<double>& v) {
    op_check(shape_numel(shape) == static_cast<int64_t>(v.size()), "Blob::f64", "shape/value mismatch");
    return Blob{std::move(name), Dtype::F64, std::move(shape), to_payload(v)};
}
Blob Blob::u32(std::string name, Shape shape, const std::vector<uint32_t>& v) {
    op_check(shape_numel(shape) == static_cast<int64_t>(v.size()), "Blob::u32", "shape/value mismatch");
    return Blob{std::move(name), Dtype::U32, std::move(shape), to_payload(v)};
}

void write_blob(const std::filesystem::path& base, const Blob& blob) {
    json header;
    header["name"] = blob.name;
    header["dtype"] = dtype_name(blob.dtype);
    header["shape"] = blob.shape;
    write_text_file(base.string() + ".json", header.dump());
    std::ofstream f(base.string() + ".bin", std::ios::binary);
    if (!f) throw Error("write_blob: cannot open " + base.string() + ".bin");
    f.write(reinterpret_cast<const char*>(blob.payload.data()),
            static_cast<std::streamsize>(blob.payload.size()));
    if (!f) throw Error("write_blob: short write to " + base.string() + ".bin");
}

Blob read_blob(const std::filesystem::path& base) {
    const std::string jpath = base.string() + ".json";
    const std::string bpath = base.string() + ".bin";
    std::string text = read_text_file(jpath);
    json header;
    try {
        header = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("corrupt tensor header " + jpath + " at byte " + std::to_string(e.byte) +
                         ": " + e.what());
    }
    Blob b;
    try {
        b.name = header.at("name").get<std::string>();
        b.dtype = dtype_from_name(header.at("dtype").get<std::string>());
        b.shape = header.at("shape").get<Shape>();
    } catch (const json::exception& e) {
        throw ParseError("malformed tensor header " + jpath + ": " + e.what());
    }
    std::ifstream f(bpath, std::ios::binary | std::ios::ate);
    if (!f) throw Error("read_blob: cannot open " + bpath);
    const auto actual = static_cast<size_t>(f.tellg());
    const size_t expected = static_cast<size_t>(b.numel()) * dtype_size(b.dtype);
    if (actual != expected)
        throw ParseError("payload length mismatch in " + bpath + ": expected " +
                         std::to_string(expected) + " bytes, got " + std::to_string(actual));
    f.seekg(0);
    b.payload.resize(actual);
    f.read(reinterpret_cast<char*>(b.payload.data()), static_cast<std::streamsize>(actual));
    if (!f) throw Error("read_blob: short read from " + bpath);
    return b;
}

void write_ply(const std::filesystem::path& path, const PlyCloud& cloud) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("write_ply: cannot open " + path.string());
    f << "ply\nformat binary_little_endian 1.0\n";
    f << "element vertex " << cloud.points.size() << "\n";
    for (const char* p : {"x", "y", "z", "red", "green", "blue"})
        f << "property float " << p << "\n";
    f << "end_header\n";
    for (size_t i = 0; i < cloud.points.size(); ++i) {
        float row[6] = {cloud.points[i][0], cloud.points[i][1], cloud.points[i][2],
                        cloud.colors[i][0], cloud.colors[i][1], cloud.colors[i][2]};
        f.write(reinterpret_cast<const char*>(row), sizeof(row));
    }
    if (!f) throw Error("write_ply: short write to " + path.string());
}

PlyCloud read_ply(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("read_ply: cannot open " + path.string());
    std::string line;
    size_t vertices = 0;
    size_t header_bytes = 0;
    std::vector<std::string> props;
    bool in_header = true;
    while (in_header && std::getline(f, line)) {
        header_bytes += line.size() + 1;
        if (line.rfind("element vertex ", 0) == 0)
            vertices = static_cast<size_t>(std::stoull(line.substr(15)));
        else if (line.rfind("property float ", 0) == 0)
            props.push_back(line.substr(15));
        else if (line == "end_header")
            in_header = false;
        else if (line.rfind("format ", 0) == 0 && line != "format binary_little_endian 1.0")
            throw ParseError("read_ply: unsupported format in " + path.string() + " at byte " +
                             std::to_string(header_bytes - line.size() - 1));
    }
    if (in_header) throw ParseError("read_ply: missing end_header in " + path.string());
    if (props != std::vector<std::string>{"x", "y", "z", "red", "green", "blue"})
        throw ParseError("read_ply: unexpected property layout in " + path.string());
    PlyCloud cloud;
    cloud.points.resize(vertices);
    cloud.colors.resize(vertices);
    for (size_t i = 0; i < vertices; ++i) {
        float row[6];
        f.read(reinterpret_cast<char*>(row), sizeof(row));
        if (!f)
            throw ParseError("read_ply: truncated payload in " + path.string() + ": expected " +
                             std::to_string(vertices * 24) + " payload bytes, got " +
                             std::to_string(i * 24 + static_cast<size_t>(f.gcount())));
        cloud.points[i] = {row[0], row[1], row[2]};
        cloud.colors[i] = {row[3], row[4], row[5]};
    }
    return cloud;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw Error("short write to " + path.string());
}

} // namespace sg::io
