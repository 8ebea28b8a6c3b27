#pragma once

#include <array>
#include <vector>

namespace sg {

// Colored point cloud; positions in meters, colors in [0,1].
struct PointCloud {
    std::vector<std::array<float, 3>> points;
    std::vector<std::array<float, 3>> colors;

    size_t size() const { return points.size(); }
};

} // namespace sg
