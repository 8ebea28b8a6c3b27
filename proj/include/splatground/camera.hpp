#pragma once

#include <array>
#include <filesystem>
#include <string>

#include <Eigen/Dense>

#include <splatground/tensor.hpp>

namespace sg {

// Pinhole camera. world_to_camera maps world points into a +z-forward camera
// frame (meters); intrinsics are in pixels.
struct Camera {
    Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
    Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
    Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const {
        return rotation() * p_world + translation();
    }
    Eigen::Vector3d center() const { return -rotation().transpose() * translation(); }

    // Throws sg::Error listing the violated invariant.
    void validate() const;

    // Camera at `eye` looking at `target`, up = +z world.
    static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, double fov_deg,
                          int width, int height);

    std::string to_json() const;
    static Camera from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static Camera load(const std::filesystem::path& path);

    // Scale camera resolution (and intrinsics) by an integer factor.
    Camera scaled(int factor) const;
};

} // namespace sg
