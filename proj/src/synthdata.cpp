#include <splatground/synthdata.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <thread>
#include <tuple>

#include <json.hpp>

#include <splatground/io.hpp>

namespace sg::synth {

using nlohmann::json;

namespace {

constexpr double kSeparationMargin = 0.01; // meters between primitive surfaces

const std::vector<std::pair<std::string, Eigen::Vector3d>>& color_palette() {
    static const std::vector<std::pair<std::string, Eigen::Vector3d>> palette = {
        {"red", {0.85, 0.15, 0.12}},    {"green", {0.15, 0.70, 0.20}},
        {"blue", {0.15, 0.25, 0.85}},   {"yellow", {0.90, 0.85, 0.10}},
        {"purple", {0.55, 0.15, 0.75}}, {"cyan", {0.10, 0.75, 0.80}},
        {"orange", {0.95, 0.55, 0.10}}, {"white", {0.92, 0.92, 0.92}},
    };
    return palette;
}

// fixed vocabulary of the shared tag space
int64_t static_tag_index(const std::string& tag) {
    static const std::vector<std::string> vocab = {
        "red",  "green",  "blue",  "yellow",     "purple",  "cyan",     "orange", "white",
        "box",  "sphere", "small", "large",      "nearest-to", "left-of", "right-of"};
    for (size_t i = 0; i < vocab.size(); ++i)
        if (vocab[i] == tag) return static_cast<int64_t>(i);
    return -1;
}

Eigen::Matrix3d yaw_rotation(double yaw) {
    Eigen::Matrix3d r;
    const double c = std::cos(yaw), s = std::sin(yaw);
    r << c, -s, 0, s, c, 0, 0, 0, 1;
    return r;
}

struct RayHit {
    bool hit = false;
    double t = 0;
    Eigen::Vector3d normal = Eigen::Vector3d::Zero();
};

RayHit intersect_sphere(const Primitive& pr, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    RayHit out;
    const Eigen::Vector3d oc = o - pr.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - pr.radius() * pr.radius();
    const double disc = b * b - c;
    if (disc < 0) return out;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t < 1e-4) t = -b + sq;
    if (t < 1e-4) return out;
    out.hit = true;
    out.t = t;
    out.normal = (o + t * d - pr.center).normalized();
    return out;
}

RayHit intersect_box(const Primitive& pr, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    RayHit out;
    const Eigen::Matrix3d rot = yaw_rotation(-pr.yaw);
    const Eigen::Vector3d ol = rot * (o - pr.center);
    const Eigen::Vector3d dl = rot * d;
    double tmin = -1e30, tmax = 1e30;
    int axis = -1;
    double axis_sign = 1;
    for (int i = 0; i < 3; ++i) {
        const double h = pr.half_size(i);
        if (std::abs(dl(i)) < 1e-12) {
            if (std::abs(ol(i)) > h) return out;
            continue;
        }
        double t0 = (-h - ol(i)) / dl(i);
        double t1 = (h - ol(i)) / dl(i);
        double sign = -1;
        if (t0 > t1) {
            std::swap(t0, t1);
            sign = 1;
        }
        if (t0 > tmin) {
            tmin = t0;
            axis = i;
            axis_sign = sign * ((dl(i) > 0) ? 1.0 : -1.0) * -1.0;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return out;
    }
    if (tmin < 1e-4 || axis < 0) return out; // cameras stay outside primitives
    out.hit = true;
    out.t = tmin;
    Eigen::Vector3d nl = Eigen::Vector3d::Zero();
    nl(axis) = axis_sign;
    out.normal = yaw_rotation(pr.yaw) * nl;
    return out;
}

RayHit intersect(const Primitive& pr, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
    return pr.kind == PrimKind::Sphere ? intersect_sphere(pr, o, d) : intersect_box(pr, o, d);
}

Eigen::Vector3d scene_centroid(const Scene& scene) {
    Eigen::Vector3d c = Eigen::Vector3d::Zero();
    for (const auto& p : scene.primitives) c += p.center;
    return c / static_cast<double>(scene.primitives.size());
}

} // namespace

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

double Primitive::surface_area() const {
    if (kind == PrimKind::Sphere) return 4.0 * M_PI * radius() * radius();
    const double a = half_size.x() * 2, b = half_size.y() * 2, c = half_size.z() * 2;
    return 2.0 * (a * b + b * c + a * c);
}

double Primitive::sdf(const Eigen::Vector3d& p) const {
    if (kind == PrimKind::Sphere) return (p - center).norm() - radius();
    const Eigen::Vector3d pl = yaw_rotation(-yaw) * (p - center);
    const Eigen::Vector3d q = pl.cwiseAbs() - half_size;
    const double outside = q.cwiseMax(0.0).norm();
    const double inside = std::min(0.0, q.maxCoeff());
    return outside + inside;
}

double Scene::pair_separation(const Primitive& a, const Primitive& b) {
    if (a.kind == PrimKind::Sphere && b.kind == PrimKind::Sphere)
        return (a.center - b.center).norm() - a.radius() - b.radius();
    if (a.kind == PrimKind::Sphere) return b.sdf(a.center) - a.radius();
    if (b.kind == PrimKind::Sphere) return a.sdf(b.center) - b.radius();

    // box-box: z interval gap or 2D separating axis gap, whichever separates
    const double zgap = std::abs(a.center.z() - b.center.z()) - a.half_size.z() - b.half_size.z();
    const Eigen::Vector2d d(b.center.x() - a.center.x(), b.center.y() - a.center.y());
    double best = -1e30;
    for (double yaw : {a.yaw, a.yaw + M_PI / 2, b.yaw, b.yaw + M_PI / 2}) {
        const Eigen::Vector2d axis(std::cos(yaw), std::sin(yaw));
        auto extent = [&](const Primitive& p) {
            const double ca = std::cos(p.yaw), sa = std::sin(p.yaw);
            const Eigen::Vector2d ux(ca, sa), uy(-sa, ca);
            return p.half_size.x() * std::abs(axis.dot(ux)) + p.half_size.y() * std::abs(axis.dot(uy));
        };
        best = std::max(best, std::abs(axis.dot(d)) - extent(a) - extent(b));
    }
    return std::max(zgap, best);
}

// ---------------------------------------------------------------------------
// scene generation
// ---------------------------------------------------------------------------

Scene generate_scene(uint64_t seed, const SceneConfig& config) {
    Scene scene;
    scene.seed = seed;
    scene.config = config;
    Rng rng(Rng::mix(seed, 0xA11CEull));
    const int want = config.min_primitives +
                     static_cast<int>(rng.below(
                         static_cast<uint64_t>(config.max_primitives - config.min_primitives + 1)));
    int attempts = 0;
    while (static_cast<int>(scene.primitives.size()) < want) {
        if (++attempts > 10000)
            throw Error("generate_scene: rejection sampling failed after 10000 attempts");
        Primitive p;
        p.kind = rng.below(2) ? PrimKind::Sphere : PrimKind::Box;
        const auto& [cname, cval] = color_palette()[rng.below(color_palette().size())];
        p.color = cval;
        if (p.kind == PrimKind::Sphere) {
            const double r = rng.uniform(config.min_size, config.max_size);
            p.half_size = Eigen::Vector3d(r, r, r);
        } else {
            for (int i = 0; i < 3; ++i)
                p.half_size(i) = rng.uniform(config.min_size, config.max_size);
            p.yaw = rng.uniform(0, 2 * M_PI);
        }
        const double ext = p.half_size.maxCoeff();
        const double lim = std::max(0.0, config.room_half - ext);
        p.center.x() = rng.uniform(-lim, lim);
        p.center.y() = rng.uniform(-lim, lim);
        p.center.z() = rng.uniform(ext, std::max(ext + 1e-3, config.room_height - ext));
        bool ok = true;
        for (const auto& other : scene.primitives)
            if (Scene::pair_separation(p, other) <= kSeparationMargin) {
                ok = false;
                break;
            }
        if (!ok) continue;
        const double mid = 0.5 * (config.min_size + config.max_size);
        p.tags = {cname, p.kind == PrimKind::Sphere ? "sphere" : "box",
                  p.half_size.mean() > mid ? "large" : "small"};
        scene.primitives.push_back(std::move(p));
    }
    return scene;
}

// ---------------------------------------------------------------------------
// point sampling
// ---------------------------------------------------------------------------

PointCloud sample_surface_points(const Scene& scene, double density, double noise_sigma) {
    op_check(density > 0, "sample_pointcloud", "density must be positive");
    Rng rng(Rng::mix(scene.seed, 0x501D7ull));
    PointCloud cloud;
    for (const auto& pr : scene.primitives) {
        const auto n = static_cast<int64_t>(std::llround(pr.surface_area() * density));
        for (int64_t i = 0; i < n; ++i) {
            Eigen::Vector3d p;
            if (pr.kind == PrimKind::Sphere) {
                Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
                while (dir.norm() < 1e-9) dir = {rng.normal(), rng.normal(), rng.normal()};
                p = pr.center + pr.radius() * dir.normalized();
            } else {
                // pick a face with probability proportional to its area
                const Eigen::Vector3d h = pr.half_size;
                const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
                const double total = areas[0] + areas[1] + areas[2];
                double u = rng.uniform() * total;
                int axis = u < areas[0] ? 0 : (u < areas[0] + areas[1] ? 1 : 2);
                const double sign = rng.below(2) ? 1.0 : -1.0;
                Eigen::Vector3d local;
                local(axis) = sign * h(axis);
                local((axis + 1) % 3) = rng.uniform(-h((axis + 1) % 3), h((axis + 1) % 3));
                local((axis + 2) % 3) = rng.uniform(-h((axis + 2) % 3), h((axis + 2) % 3));
                p = pr.center + yaw_rotation(pr.yaw) * local;
            }
            if (noise_sigma > 0)
                p += Eigen::Vector3d(rng.normal(0, noise_sigma), rng.normal(0, noise_sigma),
                                     rng.normal(0, noise_sigma));
            cloud.points.push_back({static_cast<float>(p.x()), static_cast<float>(p.y()),
                                    static_cast<float>(p.z())});
            cloud.colors.push_back({static_cast<float>(pr.color.x()),
                                    static_cast<float>(pr.color.y()),
                                    static_cast<float>(pr.color.z())});
        }
    }
    return cloud;
}

PointCloud sample_pointcloud(const Scene& scene, double density, double noise_sigma) {
    return voxel_downsample(sample_surface_points(scene, density, noise_sigma),
                            scene.config.voxel_cell);
}

PointCloud voxel_downsample(const PointCloud& cloud, double cell) {
    op_check(cell > 0, "voxel_downsample", "cell size must be positive");
    struct Entry {
        std::array<int64_t, 3> key;
        size_t idx;
    };
    std::vector<Entry> entries(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) {
        entries[i].idx = i;
        for (int a = 0; a < 3; ++a)
            entries[i].key[static_cast<size_t>(a)] =
                static_cast<int64_t>(std::floor(static_cast<double>(cloud.points[i][static_cast<size_t>(a)]) / cell));
    }
    // canonical order: voxel index, then point payload, so accumulation is
    // permutation-invariant bit for bit
    std::sort(entries.begin(), entries.end(), [&](const Entry& a, const Entry& b) {
        if (a.key != b.key) return a.key < b.key;
        if (cloud.points[a.idx] != cloud.points[b.idx]) return cloud.points[a.idx] < cloud.points[b.idx];
        return cloud.colors[a.idx] < cloud.colors[b.idx];
    });
    PointCloud out;
    size_t i = 0;
    while (i < entries.size()) {
        size_t j = i;
        Eigen::Vector3d pos = Eigen::Vector3d::Zero(), col = Eigen::Vector3d::Zero();
        while (j < entries.size() && entries[j].key == entries[i].key) {
            for (int a = 0; a < 3; ++a) {
                pos(a) += cloud.points[entries[j].idx][static_cast<size_t>(a)];
                col(a) += cloud.colors[entries[j].idx][static_cast<size_t>(a)];
            }
            ++j;
        }
        const double inv = 1.0 / static_cast<double>(j - i);
        out.points.push_back({static_cast<float>(pos.x() * inv), static_cast<float>(pos.y() * inv),
                              static_cast<float>(pos.z() * inv)});
        out.colors.push_back({static_cast<float>(col.x() * inv), static_cast<float>(col.y() * inv),
                              static_cast<float>(col.z() * inv)});
        i = j;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ground-truth views
// ---------------------------------------------------------------------------

LabeledView render_gt_view(const Scene& scene, const Camera& camera, std::vector<float>* depth_out) {
    camera.validate();
    LabeledView view;
    view.camera = camera;
    view.width = camera.width;
    view.height = camera.height;
    view.num_instances = static_cast<int64_t>(scene.primitives.size());
    view.embed_dim = scene.config.embed_dim;
    const int w = camera.width, h = camera.height;
    view.image.assign(static_cast<size_t>(h * w * 3), 0.0f);
    view.semantics.assign(static_cast<size_t>(h * w), 0u);
    if (depth_out) depth_out->assign(static_cast<size_t>(h * w), 0.0f);

    const Eigen::Vector3d origin = camera.center();
    const Eigen::Matrix3d r_wc = camera.rotation().transpose();
    const Eigen::Vector3d light = Eigen::Vector3d(0.4, -0.35, 0.85).normalized();

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            Eigen::Vector3d dir_cam((x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0);
            const Eigen::Vector3d dir = (r_wc * dir_cam).normalized();
            double best_t = 1e30;
            int best = -1;
            Eigen::Vector3d best_n = Eigen::Vector3d::Zero();
            for (size_t k = 0; k < scene.primitives.size(); ++k) {
                const RayHit hit = intersect(scene.primitives[k], origin, dir);
                if (hit.hit && hit.t < best_t) {
                    best_t = hit.t;
                    best = static_cast<int>(k);
                    best_n = hit.normal;
                }
            }
            if (best < 0) continue;
            const size_t pix = static_cast<size_t>(y * w + x);
            view.semantics[pix] = static_cast<uint32_t>(best + 1);
            if (depth_out) (*depth_out)[pix] = static_cast<float>(best_t);
            const double shade = 0.35 + 0.65 * std::max(0.0, best_n.dot(light));
            const Eigen::Vector3d c = scene.primitives[static_cast<size_t>(best)].color * shade;
            for (int ch = 0; ch < 3; ++ch)
                view.image[pix * 3 + static_cast<size_t>(ch)] =
                    static_cast<float>(std::min(1.0, std::max(0.0, c(ch))));
        }
    }

    view.index2sem.resize(static_cast<size_t>(view.num_instances * view.embed_dim));
    for (int64_t k = 0; k < view.num_instances; ++k) {
        auto e = oracle_embedding(scene.primitives[static_cast<size_t>(k)].tags,
                                  scene.config.embed_seed, view.embed_dim);
        std::copy(e.begin(), e.end(), view.index2sem.begin() + k * view.embed_dim);
    }
    return view;
}

std::vector<float> LabeledView::binary_mask(uint32_t instance) const {
    std::vector<float> m(semantics.size());
    for (size_t i = 0; i < semantics.size(); ++i) m[i] = semantics[i] == instance ? 1.0f : 0.0f;
    return m;
}

int64_t LabeledView::pixel_count(uint32_t instance) const {
    int64_t n = 0;
    for (uint32_t s : semantics) n += (s == instance);
    return n;
}

// ---------------------------------------------------------------------------
// oracle embeddings
// ---------------------------------------------------------------------------

std::vector<float> tag_vector(const std::string& tag, uint64_t seed, int64_t embed_dim) {
    int64_t idx = static_tag_index(tag);
    if (idx < 0) idx = static_cast<int64_t>(fnv1a(tag) % static_cast<uint64_t>(embed_dim));
    idx = static_cast<int64_t>((static_cast<uint64_t>(idx) + seed) % static_cast<uint64_t>(embed_dim));
    std::vector<float> v(static_cast<size_t>(embed_dim), 0.0f);
    v[static_cast<size_t>(idx)] = 1.0f;
    return v;
}

std::vector<float> oracle_embedding(const std::vector<std::string>& tags, uint64_t seed,
                                    int64_t embed_dim) {
    op_check(!tags.empty(), "oracle_embedding", "attribute tags must be nonempty");
    std::vector<float> acc(static_cast<size_t>(embed_dim), 0.0f);
    for (const auto& tag : tags) {
        auto v = tag_vector(tag, seed, embed_dim);
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
    }
    double norm = 0;
    for (float x : acc) norm += static_cast<double>(x) * x;
    norm = std::sqrt(std::max(norm, 1e-24));
    for (auto& x : acc) x = static_cast<float>(x / norm);
    return acc;
}

// ---------------------------------------------------------------------------
// instance sampling
// ---------------------------------------------------------------------------

int64_t min_pixels_for(int width, int height) {
    return static_cast<int64_t>(
        std::ceil(1024.0 * (static_cast<double>(width) * height) / (512.0 * 512.0)));
}

InstanceSample sample_instances(const LabeledView& view, Rng& rng, int max_instances,
                                std::optional<int64_t> min_pixels) {
    const int64_t threshold = min_pixels ? *min_pixels : min_pixels_for(view.width, view.height);
    std::vector<int64_t> count(static_cast<size_t>(view.num_instances) + 1, 0);
    for (uint32_t s : view.semantics) count[s]++;
    std::vector<uint32_t> survivors;
    for (int64_t id = 1; id <= view.num_instances; ++id)
        if (count[static_cast<size_t>(id)] >= threshold) survivors.push_back(static_cast<uint32_t>(id));

    InstanceSample out;
    if (survivors.empty()) return out;

    int take;
    if (survivors.size() == 1) {
        take = 1;
    } else {
        // never take every surviving instance; this matters for pretraining
        const int kmax = std::min<int>(max_instances, static_cast<int>(survivors.size()) - 1);
        take = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(kmax)));
    }
    for (int i = 0; i < take; ++i) {
        const auto j = i + static_cast<int>(rng.below(static_cast<uint64_t>(survivors.size() - static_cast<size_t>(i))));
        std::swap(survivors[static_cast<size_t>(i)], survivors[static_cast<size_t>(j)]);
    }
    survivors.resize(static_cast<size_t>(take));

    const int64_t f = view.embed_dim;
    for (size_t i = 0; i < survivors.size(); ++i) {
        const uint32_t id = survivors[i];
        out.instance_ids.push_back(id);
        const float* e = &view.index2sem[static_cast<size_t>((id - 1) * f)];
        out.query_embeddings.insert(out.query_embeddings.end(), e, e + f);
        auto m = view.binary_mask(id);
        out.gt_masks.insert(out.gt_masks.end(), m.begin(), m.end());
        out.token_of.push_back(static_cast<int64_t>(i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// caches
// ---------------------------------------------------------------------------

void write_cache(const LabeledView& view, const std::filesystem::path& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    view.camera.save(dir / (name + ".camera.json"));
    io::write_blob(dir / (name + ".image"),
                   io::Blob::f32("image", {view.height, view.width, 3}, view.image));
    io::write_blob(dir / (name + ".semantics"),
                   io::Blob::u32("semantics", {view.height, view.width}, view.semantics));
    io::write_blob(dir / (name + ".index2semantics"),
                   io::Blob::f32("index2semantics", {view.num_instances, view.embed_dim},
                                 view.index2sem));
}

LabeledView read_cache(const std::filesystem::path& dir, const std::string& name) {
    LabeledView view;
    view.camera = Camera::load(dir / (name + ".camera.json"));
    auto image = io::read_blob(dir / (name + ".image"));
    auto sem = io::read_blob(dir / (name + ".semantics"));
    auto idx = io::read_blob(dir / (name + ".index2semantics"));
    view.height = static_cast<int>(image.shape.at(0));
    view.width = static_cast<int>(image.shape.at(1));
    view.image = image.as_f32();
    view.semantics = sem.as_u32();
    view.num_instances = idx.shape.at(0);
    view.embed_dim = idx.shape.at(1);
    view.index2sem = idx.as_f32();
    op_check(view.width == view.camera.width && view.height == view.camera.height, "read_cache",
             "camera/image size mismatch in " + (dir / name).string());
    return view;
}

// ---------------------------------------------------------------------------
// cameras
// ---------------------------------------------------------------------------

std::vector<Camera> sample_cameras(const Scene& scene, int count, Rng& rng) {
    const Eigen::Vector3d centroid = scene_centroid(scene);
    double rb = 0;
    for (const auto& p : scene.primitives)
        rb = std::max(rb, (p.center - centroid).norm() + p.half_size.maxCoeff());
    const double radius = std::max(1.6, 2.3 * rb);
    std::vector<Camera> cams;
    for (int i = 0; i < count; ++i) {
        const double az = 2 * M_PI * (i + 0.35 * rng.uniform()) / count;
        const double el = rng.uniform(0.25, 0.85);
        Eigen::Vector3d eye = centroid + radius * Eigen::Vector3d(std::cos(az) * std::cos(el),
                                                                  std::sin(az) * std::cos(el),
                                                                  std::sin(el));
        cams.push_back(Camera::look_at(eye, centroid, 55.0, scene.config.image_size,
                                       scene.config.image_size));
    }
    return cams;
}

// ---------------------------------------------------------------------------
// 3D labels and referential templates
// ---------------------------------------------------------------------------

std::vector<uint32_t> assign_points_to_instances(const Scene& scene, const PointCloud& cloud) {
    std::vector<uint32_t> out(cloud.size(), 0);
    for (size_t i = 0; i < cloud.size(); ++i) {
        const Eigen::Vector3d p(cloud.points[i][0], cloud.points[i][1], cloud.points[i][2]);
        double best = 1e30;
        for (size_t k = 0; k < scene.primitives.size(); ++k) {
            const double d = std::abs(scene.primitives[k].sdf(p));
            if (d < best) {
                best = d;
                out[i] = static_cast<uint32_t>(k + 1);
            }
        }
    }
    return out;
}

namespace {

std::string shape_word(const Primitive& p) { return p.kind == PrimKind::Sphere ? "sphere" : "box"; }
std::string color_word(const Primitive& p) { return p.tags.at(0); }

} // namespace

std::vector<QuerySpec> build_finetune_queries(const Scene& scene) {
    const auto& prims = scene.primitives;
    const int n = static_cast<int>(prims.size());
    std::vector<QuerySpec> queries;

    auto count_matching = [&](auto&& pred) {
        int c = 0;
        for (int i = 0; i < n; ++i) c += pred(i) ? 1 : 0;
        return c;
    };

    for (int i = 0; i < n; ++i) {
        const std::string shape_i = shape_word(prims[static_cast<size_t>(i)]);
        const std::string color_i = color_word(prims[static_cast<size_t>(i)]);
        std::optional<std::vector<std::string>> words;

        // color + shape, when unique
        if (count_matching([&](int j) {
                return shape_word(prims[static_cast<size_t>(j)]) == shape_i &&
                       color_word(prims[static_cast<size_t>(j)]) == color_i;
            }) == 1) {
            words = std::vector<std::string>{color_i, shape_i};
        }

        // color + size + shape
        if (!words) {
            const std::string size_i = prims[static_cast<size_t>(i)].tags.at(2);
            if (count_matching([&](int j) {
                    return shape_word(prims[static_cast<size_t>(j)]) == shape_i &&
                           color_word(prims[static_cast<size_t>(j)]) == color_i &&
                           prims[static_cast<size_t>(j)].tags.at(2) == size_i;
                }) == 1)
                words = std::vector<std::string>{color_i, size_i, shape_i};
        }

        // "<shape> nearest-to <color> <shape>" against a uniquely-describable anchor
        if (!words) {
            for (int y = 0; y < n && !words; ++y) {
                if (y == i) continue;
                const std::string shape_y = shape_word(prims[static_cast<size_t>(y)]);
                const std::string color_y = color_word(prims[static_cast<size_t>(y)]);
                if (count_matching([&](int j) {
                        return shape_word(prims[static_cast<size_t>(j)]) == shape_y &&
                               color_word(prims[static_cast<size_t>(j)]) == color_y;
                    }) != 1)
                    continue;
                // nearest instance of shape_i to the anchor y
                int best = -1;
                double best_d = 1e30;
                for (int j = 0; j < n; ++j) {
                    if (j == y || shape_word(prims[static_cast<size_t>(j)]) != shape_i) continue;
                    const double d =
                        (prims[static_cast<size_t>(j)].center - prims[static_cast<size_t>(y)].center).norm();
                    if (d < best_d) {
                        best_d = d;
                        best = j;
                    }
                }
                if (best == i)
                    words = std::vector<std::string>{shape_i, "nearest-to", color_y, shape_y};
            }
        }

        // "<shape> left-of/right-of <color> <shape>" in the canonical world frame
        if (!words) {
            for (int y = 0; y < n && !words; ++y) {
                if (y == i) continue;
                const std::string shape_y = shape_word(prims[static_cast<size_t>(y)]);
                const std::string color_y = color_word(prims[static_cast<size_t>(y)]);
                if (count_matching([&](int j) {
                        return shape_word(prims[static_cast<size_t>(j)]) == shape_y &&
                               color_word(prims[static_cast<size_t>(j)]) == color_y;
                    }) != 1)
                    continue;
                for (bool left : {true, false}) {
                    auto satisfies = [&](int j) {
                        if (j == y || shape_word(prims[static_cast<size_t>(j)]) != shape_i) return false;
                        const double dx = prims[static_cast<size_t>(j)].center.x() -
                                          prims[static_cast<size_t>(y)].center.x();
                        return left ? dx < 0 : dx > 0;
                    };
                    if (count_matching(satisfies) == 1 && satisfies(i)) {
                        words = std::vector<std::string>{shape_i, left ? "left-of" : "right-of",
                                                         color_y, shape_y};
                        break;
                    }
                }
            }
        }

        if (!words) continue; // ambiguous instance, no unambiguous template exists
        QuerySpec q;
        q.kind = QuerySpec::Kind::AttributeTemplate;
        q.words = *words;
        q.target_instance = i + 1;
        q.embedding = oracle_embedding(q.words, scene.config.embed_seed, scene.config.embed_dim);
        queries.push_back(std::move(q));
    }
    return queries;
}

// ---------------------------------------------------------------------------
// dataset generation and loading
// ---------------------------------------------------------------------------

std::string scene_config_to_json(const SceneConfig& c) {
    json j;
    j["min_primitives"] = c.min_primitives;
    j["max_primitives"] = c.max_primitives;
    j["room_half"] = c.room_half;
    j["room_height"] = c.room_height;
    j["min_size"] = c.min_size;
    j["max_size"] = c.max_size;
    j["density"] = c.density;
    j["noise_sigma"] = c.noise_sigma;
    j["voxel_cell"] = c.voxel_cell;
    j["image_size"] = c.image_size;
    j["views_per_scene"] = c.views_per_scene;
    j["embed_dim"] = c.embed_dim;
    j["embed_seed"] = c.embed_seed;
    return j.dump(2);
}

SceneConfig scene_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw io::ParseError("corrupt scene config at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    SceneConfig c;
    c.min_primitives = j.value("min_primitives", c.min_primitives);
    c.max_primitives = j.value("max_primitives", c.max_primitives);
    c.room_half = j.value("room_half", c.room_half);
    c.room_height = j.value("room_height", c.room_height);
    c.min_size = j.value("min_size", c.min_size);
    c.max_size = j.value("max_size", c.max_size);
    c.density = j.value("density", c.density);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.voxel_cell = j.value("voxel_cell", c.voxel_cell);
    c.image_size = j.value("image_size", c.image_size);
    c.views_per_scene = j.value("views_per_scene", c.views_per_scene);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.embed_seed = j.value("embed_seed", c.embed_seed);
    return c;
}

namespace {

std::string scene_dir_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04d", index);
    return buf;
}

void write_one_scene(const std::filesystem::path& root, uint64_t dataset_seed, int index,
                     const SceneConfig& config) {
    const uint64_t scene_seed = Rng::mix(dataset_seed, static_cast<uint64_t>(index));
    SceneConfig cfg = config;
    cfg.embed_seed = dataset_seed;
    Scene scene = generate_scene(scene_seed, cfg);
    PointCloud cloud = sample_pointcloud(scene, cfg.density, cfg.noise_sigma);

    const auto dir = root / scene_dir_name(index);
    std::filesystem::create_directories(dir / "views");

    io::PlyCloud ply;
    ply.points = cloud.points;
    ply.colors = cloud.colors;
    io::write_ply(dir / "pointcloud.ply", ply);

    Rng cam_rng(Rng::mix(scene_seed, 0xCA33ull));
    auto cams = sample_cameras(scene, cfg.views_per_scene, cam_rng);
    for (size_t v = 0; v < cams.size(); ++v) {
        auto view = render_gt_view(scene, cams[v]);
        write_cache(view, dir / "views", "v" + std::to_string(v));
    }

    json labels;
    labels["scene_seed"] = scene_seed;
    labels["num_views"] = static_cast<int>(cams.size());
    labels["point_instance"] = assign_points_to_instances(scene, cloud);
    labels["queries"] = json::array();
    for (const auto& q : build_finetune_queries(scene)) {
        json jq;
        jq["words"] = q.words;
        jq["target"] = q.target_instance;
        jq["embedding"] = q.embedding;
        labels["queries"].push_back(jq);
    }
    io::write_text_file(dir / "labels3d.json", labels.dump());
}

} // namespace

void generate_dataset(const std::filesystem::path& root, uint64_t seed, int num_scenes,
                      const SceneConfig& config, int threads) {
    std::filesystem::create_directories(root);
    threads = std::max(1, threads);
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= num_scenes) return;
            write_one_scene(root, seed, i, config);
        }
    };
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    // manifest written last, single-threaded
    json manifest;
    manifest["seed"] = seed;
    manifest["num_scenes"] = num_scenes;
    manifest["config"] = json::parse(scene_config_to_json(config));
    manifest["scenes"] = json::array();
    for (int i = 0; i < num_scenes; ++i) {
        const auto dir = scene_dir_name(i);
        auto labels = json::parse(io::read_text_file(root / dir / "labels3d.json"));
        Scene scene = generate_scene(Rng::mix(seed, static_cast<uint64_t>(i)), config);
        json e;
        e["dir"] = dir;
        e["views"] = labels.at("num_views").get<int>();
        e["instances"] = static_cast<int>(scene.primitives.size());
        manifest["scenes"].push_back(e);
    }
    io::write_text_file(root / "manifest.json", manifest.dump(2));
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
    json j;
    const auto path = root / "manifest.json";
    try {
        j = json::parse(io::read_text_file(path));
    } catch (const json::parse_error& e) {
        throw io::ParseError("corrupt manifest " + path.string() + " at byte " +
                             std::to_string(e.byte) + ": " + e.what());
    }
    DatasetManifest m;
    m.seed = j.at("seed").get<uint64_t>();
    m.num_scenes = j.at("num_scenes").get<int>();
    m.config = scene_config_from_json(j.at("config").dump());
    for (const auto& e : j.at("scenes")) {
        SceneEntry s;
        s.dir = e.at("dir").get<std::string>();
        s.views = e.at("views").get<int>();
        s.instances = e.at("instances").get<int>();
        m.scenes.push_back(s);
    }
    return m;
}

SceneData load_scene(const std::filesystem::path& root, const DatasetManifest& manifest, int index) {
    op_check(index >= 0 && index < manifest.num_scenes, "load_scene", "scene index out of range");
    SceneData data;
    data.dir = root / manifest.scenes[static_cast<size_t>(index)].dir;
    data.num_views = manifest.scenes[static_cast<size_t>(index)].views;

    SceneConfig cfg = manifest.config;
    cfg.embed_seed = manifest.seed;
    data.scene = generate_scene(Rng::mix(manifest.seed, static_cast<uint64_t>(index)), cfg);

    auto ply = io::read_ply(data.dir / "pointcloud.ply");
    data.cloud.points = std::move(ply.points);
    data.cloud.colors = std::move(ply.colors);

    auto labels = json::parse(io::read_text_file(data.dir / "labels3d.json"));
    data.point_instance = labels.at("point_instance").get<std::vector<uint32_t>>();
    op_check(data.point_instance.size() == data.cloud.size(), "load_scene",
             "labels3d point count does not match the point cloud");
    for (const auto& jq : labels.at("queries")) {
        QuerySpec q;
        q.kind = QuerySpec::Kind::AttributeTemplate;
        q.words = jq.at("words").get<std::vector<std::string>>();
        q.target_instance = jq.at("target").get<int>();
        q.embedding = jq.at("embedding").get<std::vector<float>>();
        data.queries.push_back(std::move(q));
    }
    return data;
}

LabeledView SceneData::view(int index) const {
    return read_cache(dir / "views", "v" + std::to_string(index));
}

} // namespace sg::synth
