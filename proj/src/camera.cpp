#include <splatground/camera.hpp>

#include <cmath>

#include <json.hpp>

#include <splatground/io.hpp>

namespace sg {

using nlohmann::json;

void Camera::validate() const {
    const Eigen::Matrix3d r = rotation();
    const double ortho = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    op_check(ortho <= 1e-5, "Camera",
             "rotation block not orthonormal (max deviation " + std::to_string(ortho) + ")");
    op_check(fx > 0 && fy > 0, "Camera", "focal lengths must be positive");
    op_check(cx > 0 && cx < width && cy > 0 && cy < height, "Camera",
             "principal point outside the image");
    op_check(width > 0 && height > 0, "Camera", "image size must be positive");
}

Camera Camera::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double fov_deg,
                       int width, int height) {
    Eigen::Vector3d fwd = (target - eye).normalized();
    Eigen::Vector3d up_world(0, 0, 1);
    if (std::abs(fwd.dot(up_world)) > 0.999) up_world = Eigen::Vector3d(0, 1, 0);
    Eigen::Vector3d right = fwd.cross(up_world).normalized();
    Eigen::Vector3d down = fwd.cross(right).normalized(); // +y points down in image space

    Eigen::Matrix3d r_cw; // camera-from-world rotation rows: right, down, forward
    r_cw.row(0) = right;
    r_cw.row(1) = down;
    r_cw.row(2) = fwd;

    Camera cam;
    cam.world_to_camera.setIdentity();
    cam.world_to_camera.topLeftCorner<3, 3>() = r_cw;
    cam.world_to_camera.topRightCorner<3, 1>() = -r_cw * eye;
    cam.width = width;
    cam.height = height;
    const double f = 0.5 * width / std::tan(0.5 * fov_deg * M_PI / 180.0);
    cam.fx = cam.fy = f;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    return cam;
}

std::string Camera::to_json() const {
    json j;
    std::vector<double> m(16);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m[static_cast<size_t>(r * 4 + c)] = world_to_camera(r, c);
    j["world_to_camera"] = m;
    j["fx"] = fx;
    j["fy"] = fy;
    j["cx"] = cx;
    j["cy"] = cy;
    j["width"] = width;
    j["height"] = height;
    return j.dump();
}

Camera Camera::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw io::ParseError("corrupt camera json at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    Camera cam;
    auto m = j.at("world_to_camera").get<std::vector<double>>();
    op_check(m.size() == 16, "Camera::from_json", "world_to_camera must have 16 entries");
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) cam.world_to_camera(r, c) = m[static_cast<size_t>(r * 4 + c)];
    cam.fx = j.at("fx").get<double>();
    cam.fy = j.at("fy").get<double>();
    cam.cx = j.at("cx").get<double>();
    cam.cy = j.at("cy").get<double>();
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.validate();
    return cam;
}

void Camera::save(const std::filesystem::path& path) const { io::write_text_file(path, to_json()); }

Camera Camera::load(const std::filesystem::path& path) {
    return from_json(io::read_text_file(path));
}

Camera Camera::scaled(int factor) const {
    Camera c = *this;
    c.fx *= factor;
    c.fy *= factor;
    c.cx *= factor;
    c.cy *= factor;
    c.width *= factor;
    c.height *= factor;
    return c;
}

} // namespace sg
