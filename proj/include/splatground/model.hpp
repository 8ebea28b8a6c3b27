#pragma once

// Feed-forward network: dense voxel-UNet point encoder, pointwise Gaussian
// decoder head, and a transformer grounding decoder that turns m learnable
// proposal tokens into mask logits over Gaussians and correspondence logits
// over query tokens (plus a no-match slot).

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <splatground/pointcloud.hpp>
#include <splatground/tensor.hpp>

namespace sg::model {

struct ModelConfig {
    int64_t proposals = 16;   // m (paper: 256)
    int decoder_layers = 2;   // paper: 8
    int64_t hidden = 64;      // paper: 512
    int heads = 4;            // paper: 8
    int64_t ffn = 256;        // paper: 2048
    double dropout = 0.0;     // paper: 0.15
    int64_t encoder_dim = 96; // per-point feature dim (paper value)
    int64_t feature_dim = 32; // Gaussian feature dim F (paper: 512)
    int64_t query_dim = 32;   // F_Q
    int grid = 32;            // dense voxel grid resolution (<= 64)
    int unet_levels = 4;      // down/up levels
    int64_t unet_base_channels = 8;
    int64_t unet_max_channels = 96; // paper caps at 256
    int64_t decode_hidden = 128;
    double max_offset = 0.10; // tanh-bounded position offset, meters

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    uint64_t hash() const { return fnv1a(to_json()); }
};

template <class T>
struct GaussianSet {
    Tensor<T> position;   // [N,3]
    Tensor<T> cov_params; // [N,6]
    Tensor<T> color;      // [N,3] in [0,1]
    Tensor<T> opacity;    // [N,1] in (0,1)
    Tensor<T> feature;    // [N,F] unit rows
};

template <class T>
struct GroundingOutput {
    Tensor<T> mask_logits; // [m, N]
    Tensor<T> corr_logits; // [m, |Q|+1], last column = no-match
};

struct SceneFrame {
    std::array<double, 3> lo{0, 0, 0};
    std::array<double, 3> hi{1, 1, 1};
    std::array<double, 3> normalize(const std::array<float, 3>& p) const {
        std::array<double, 3> out;
        for (int a = 0; a < 3; ++a) {
            const double ext = std::max(1e-6, hi[static_cast<size_t>(a)] - lo[static_cast<size_t>(a)]);
            out[static_cast<size_t>(a)] =
                (static_cast<double>(p[static_cast<size_t>(a)]) - lo[static_cast<size_t>(a)]) / ext;
        }
        return out;
    }
    static SceneFrame from_cloud(const PointCloud& cloud);
};

template <class T>
struct ForwardOutput {
    SceneFrame frame;
    Tensor<T> point_features; // [P, encoder_dim]
    GaussianSet<T> gaussians;
    GroundingOutput<T> grounding;
};

template <class T>
class Model {
public:
    Model(ModelConfig config, uint64_t seed);

    const ModelConfig& config() const { return config_; }

    // per-point features from the dense voxel UNet; permutation-equivariant
    Tensor<T> encode_points(const PointCloud& cloud, const SceneFrame& frame);

    // pointwise MLP head; one Gaussian per input point
    GaussianSet<T> decode_gaussians(const Tensor<T>& point_features, const PointCloud& cloud);

    // transformer grounding decoder over Gaussian and query tokens
    GroundingOutput<T> ground(const Tensor<T>& gaussian_features, const PointCloud& cloud,
                              const SceneFrame& frame, const Tensor<T>& queries);

    ForwardOutput<T> forward(const PointCloud& cloud, const Tensor<T>& queries);

    int64_t count_parameters() const;
    std::vector<std::pair<std::string, Tensor<T>>>& parameters() { return params_; }
    Tensor<T> param(const std::string& name) const;

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    Rng& dropout_rng() { return dropout_rng_; }

    void save(const std::filesystem::path& dir) const;
    // throws on config-hash mismatch
    void load(const std::filesystem::path& dir);

private:
    Tensor<T> add_param(const std::string& name, Shape shape, double init_std, double bias_fill = 0);
    Tensor<T> linear(const std::string& name, const Tensor<T>& x) const;
    Tensor<T> attention(const std::string& prefix, const Tensor<T>& queries_in,
                        const Tensor<T>& keys_in, const Tensor<T>& values_in) const;
    Tensor<T> maybe_dropout(const Tensor<T>& x);

    ModelConfig config_;
    std::vector<std::pair<std::string, Tensor<T>>> params_;
    std::map<std::string, size_t> index_;
    bool training_ = false;
    Rng dropout_rng_;
};

// sinusoidal encoding of normalized [0,1]^3 coordinates into `dim` channels
template <class T>
Tensor<T> positional_encoding(const std::vector<std::array<double, 3>>& coords, int64_t dim);

using ModelF = Model<float>;
using ModelD = Model<double>;

} // namespace sg::model

#include <splatground/model_impl.hpp>
