#pragma once

// Synthetic scene generator and pseudo-label oracle. Scenes are boxes and
// spheres with exact ray intersections, so ground-truth masks come from
// analytic ray casting rather than the rasterizer. Instance embeddings live
// in a shared attribute-tag space that also serves as the query space.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include <splatground/camera.hpp>
#include <splatground/pointcloud.hpp>
#include <splatground/rng.hpp>

namespace sg::synth {

enum class PrimKind { Box, Sphere };

struct Primitive {
    PrimKind kind = PrimKind::Box;
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double yaw = 0;                                   // boxes rotate about z
    Eigen::Vector3d half_size = Eigen::Vector3d::Zero(); // sphere radius in x()
    Eigen::Vector3d color = Eigen::Vector3d::Zero();
    std::vector<std::string> tags;                    // color + shape + size class

    double radius() const { return half_size.x(); }
    double surface_area() const;
    double sdf(const Eigen::Vector3d& p) const;
};

struct SceneConfig {
    int min_primitives = 2;
    int max_primitives = 5;
    double room_half = 1.1;   // primitives centered in [-room_half, room_half]^2
    double room_height = 1.1;
    double min_size = 0.10;   // half extent / radius, meters
    double max_size = 0.26;
    double density = 2000.0;  // surface points per square meter
    double noise_sigma = 0.0; // optional Gaussian jitter, meters
    double voxel_cell = 0.05;
    int image_size = 128;
    int views_per_scene = 6;
    int64_t embed_dim = 32;
    uint64_t embed_seed = 0; // dataset-wide seed of the shared tag space
};

std::string scene_config_to_json(const SceneConfig& c);
SceneConfig scene_config_from_json(const std::string& text);

struct Scene {
    uint64_t seed = 0;
    SceneConfig config;
    std::vector<Primitive> primitives;

    // positive when the two primitives are separated (exact overlap test)
    static double pair_separation(const Primitive& a, const Primitive& b);
};

struct LabeledView {
    Camera camera;
    std::vector<float> image;        // H*W*3
    std::vector<uint32_t> semantics; // H*W instance indices, 0 = background
    std::vector<float> index2sem;    // K * F_Q unit embeddings, row i = instance i+1
    int64_t num_instances = 0;
    int64_t embed_dim = 0;
    int width = 0, height = 0;

    std::vector<float> binary_mask(uint32_t instance) const;
    int64_t pixel_count(uint32_t instance) const;
};

struct QuerySpec {
    enum class Kind { InstanceEmbedding, AttributeTemplate };
    Kind kind = Kind::AttributeTemplate;
    std::vector<std::string> words; // template words, each a tag in the shared space
    int target_instance = 0;        // 1-based
    std::vector<float> embedding;   // F_Q, unit norm
};

// Per-view pseudo-label sample: up to 8 surviving instances with their masks.
struct InstanceSample {
    std::vector<uint32_t> instance_ids;   // sampled ids (1-based), |Q| entries
    std::vector<float> query_embeddings;  // |Q| x F_Q
    std::vector<float> gt_masks;          // |Q| x (H*W), binary
    std::vector<int64_t> token_of;        // instance i <-> token i (identity)
};

// ---------------------------------------------------------------------------

Scene generate_scene(uint64_t seed, const SceneConfig& config);

// raw area-weighted surface samples, before voxel downsampling
PointCloud sample_surface_points(const Scene& scene, double density, double noise_sigma = 0.0);

PointCloud sample_pointcloud(const Scene& scene, double density, double noise_sigma = 0.0);

// one centroid per occupied cell, colors averaged, output sorted by voxel index
PointCloud voxel_downsample(const PointCloud& cloud, double cell = 0.05);

// analytic ray-cast ground truth; optionally returns the depth buffer
LabeledView render_gt_view(const Scene& scene, const Camera& camera,
                           std::vector<float>* depth_out = nullptr);

// deterministic unit embedding from attribute tags in the shared tag space
std::vector<float> oracle_embedding(const std::vector<std::string>& tags, uint64_t seed,
                                    int64_t embed_dim);
std::vector<float> tag_vector(const std::string& tag, uint64_t seed, int64_t embed_dim);

int64_t min_pixels_for(int width, int height); // 1024 at 512x512, area-scaled

// Samples up to `max_instances` surviving instances (never all of them when
// more than one survives). Empty result means the view should be skipped.
InstanceSample sample_instances(const LabeledView& view, Rng& rng, int max_instances = 8,
                                std::optional<int64_t> min_pixels = std::nullopt);

void write_cache(const LabeledView& view, const std::filesystem::path& dir,
                 const std::string& name);
LabeledView read_cache(const std::filesystem::path& dir, const std::string& name);

// cameras on a sphere around the scene centroid, looking at it
std::vector<Camera> sample_cameras(const Scene& scene, int count, Rng& rng);

// nearest-primitive assignment per point (1-based ids)
std::vector<uint32_t> assign_points_to_instances(const Scene& scene, const PointCloud& cloud);

// unambiguous referential templates over {color, shape, nearest-to, left/right-of}
std::vector<QuerySpec> build_finetune_queries(const Scene& scene);

// ---------------------------------------------------------------------------
// dataset layout:
//   root/manifest.json
//   root/scene_%04d/pointcloud.ply
//   root/scene_%04d/views/v%d.{camera.json,image.*,semantics.*,index2semantics.*}
//   root/scene_%04d/labels3d.json
// ---------------------------------------------------------------------------

struct SceneEntry {
    std::string dir;
    int views = 0;
    int instances = 0;
};

struct DatasetManifest {
    uint64_t seed = 0;
    int num_scenes = 0;
    SceneConfig config;
    std::vector<SceneEntry> scenes;
};

void generate_dataset(const std::filesystem::path& root, uint64_t seed, int num_scenes,
                      const SceneConfig& config, int threads = 1);

DatasetManifest read_manifest(const std::filesystem::path& root);

struct SceneData {
    Scene scene; // regenerated from the stored seed (bitwise deterministic)
    PointCloud cloud;
    std::vector<uint32_t> point_instance;
    std::vector<QuerySpec> queries;
    int num_views = 0;
    std::filesystem::path dir;

    LabeledView view(int index) const;
};

SceneData load_scene(const std::filesystem::path& root, const DatasetManifest& manifest, int index);

} // namespace sg::synth
