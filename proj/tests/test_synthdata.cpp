#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <splatground/io.hpp>
#include <splatground/synthdata.hpp>

using namespace sg;
using namespace sg::synth;
namespace fs = std::filesystem;

namespace {

Primitive make_box(Eigen::Vector3d c, Eigen::Vector3d h, std::string color, double yaw = 0) {
    Primitive p;
    p.kind = PrimKind::Box;
    p.center = std::move(c);
    p.half_size = std::move(h);
    p.yaw = yaw;
    p.color = Eigen::Vector3d(0.8, 0.2, 0.2);
    p.tags = {std::move(color), "box", "small"};
    return p;
}

Primitive make_sphere(Eigen::Vector3d c, double r, std::string color) {
    Primitive p;
    p.kind = PrimKind::Sphere;
    p.center = std::move(c);
    p.half_size = Eigen::Vector3d(r, r, r);
    p.color = Eigen::Vector3d(0.2, 0.2, 0.8);
    p.tags = {std::move(color), "sphere", "small"};
    return p;
}

fs::path temp_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("splatground_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("generate_scene is deterministic and respects the primitive count") {
    SceneConfig cfg;
    cfg.min_primitives = cfg.max_primitives = 2;
    auto a = generate_scene(7, cfg);
    auto b = generate_scene(7, cfg);
    CHECK(a.primitives.size() == 2);
    REQUIRE(a.primitives.size() == b.primitives.size());
    for (size_t i = 0; i < a.primitives.size(); ++i) {
        CHECK(a.primitives[i].center == b.primitives[i].center);
        CHECK(a.primitives[i].half_size == b.primitives[i].half_size);
        CHECK(a.primitives[i].yaw == b.primitives[i].yaw);
        CHECK(a.primitives[i].tags == b.primitives[i].tags);
    }
}

TEST_CASE("1000 seeds produce no interpenetrating primitives") {
    SceneConfig cfg;
    cfg.min_primitives = 3;
    cfg.max_primitives = 8;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        auto scene = generate_scene(seed, cfg);
        for (size_t i = 0; i < scene.primitives.size(); ++i)
            for (size_t j = i + 1; j < scene.primitives.size(); ++j)
                CHECK(Scene::pair_separation(scene.primitives[i], scene.primitives[j]) > 0.0);
    }
}

TEST_CASE("surface sampling of a unit cube at density 1000 gives ~6000 points") {
    Scene scene;
    scene.seed = 3;
    scene.primitives.push_back(make_box({0, 0, 0.5}, {0.5, 0.5, 0.5}, "red"));
    auto raw = sample_surface_points(scene, 1000.0);
    CHECK(raw.size() >= 5700);
    CHECK(raw.size() <= 6300);

    SUBCASE("all samples lie on the surface before noise") {
        for (size_t i = 0; i < raw.size(); i += 7) {
            Eigen::Vector3d p(raw.points[i][0], raw.points[i][1], raw.points[i][2]);
            CHECK(std::abs(scene.primitives[0].sdf(p)) <= 1e-6);
        }
    }
    SUBCASE("configured noise perturbs points off the surface with the right scale") {
        auto noisy = sample_surface_points(scene, 1000.0, 0.005);
        double mean_abs = 0;
        for (size_t i = 0; i < noisy.size(); ++i) {
            Eigen::Vector3d p(noisy.points[i][0], noisy.points[i][1], noisy.points[i][2]);
            mean_abs += std::abs(scene.primitives[0].sdf(p));
        }
        mean_abs /= static_cast<double>(noisy.size());
        // |N(0, sigma)| has mean sigma*sqrt(2/pi) ~ 0.8 sigma
        CHECK(mean_abs > 0.5 * 0.005);
        CHECK(mean_abs < 1.2 * 0.005);
    }
}

TEST_CASE("voxel_downsample fixtures") {
    SUBCASE("two points in one 5cm cell merge to their centroid") {
        PointCloud c;
        c.points = {{0.01f, 0.01f, 0.01f}, {0.02f, 0.02f, 0.02f}};
        c.colors = {{1, 0, 0}, {0, 1, 0}};
        auto d = voxel_downsample(c, 0.05);
        REQUIRE(d.size() == 1);
        CHECK(d.points[0][0] == doctest::Approx(0.015));
        CHECK(d.colors[0][0] == doctest::Approx(0.5));
    }
    SUBCASE("well-separated points survive unchanged") {
        PointCloud c;
        c.points = {{0.0f, 0.0f, 0.0f}, {0.2f, 0.2f, 0.2f}, {-0.3f, 0.1f, 0.4f}};
        c.colors = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        auto d = voxel_downsample(c, 0.05);
        CHECK(d.size() == 3);
    }
    SUBCASE("idempotent") {
        Rng rng(5);
        PointCloud c;
        for (int i = 0; i < 500; ++i) {
            c.points.push_back({static_cast<float>(rng.uniform(-1, 1)),
                                static_cast<float>(rng.uniform(-1, 1)),
                                static_cast<float>(rng.uniform(-1, 1))});
            c.colors.push_back({static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                                static_cast<float>(rng.uniform())});
        }
        auto once = voxel_downsample(c, 0.05);
        auto twice = voxel_downsample(once, 0.05);
        REQUIRE(once.size() == twice.size());
        CHECK(once.points == twice.points);
        CHECK(once.colors == twice.colors);
    }
}

TEST_CASE("render_gt_view fixtures") {
    SceneConfig cfg;
    cfg.image_size = 96;
    SUBCASE("single centered sphere paints a disk of index 1") {
        Scene scene;
        scene.seed = 1;
        scene.config = cfg;
        scene.primitives.push_back(make_sphere({0, 0, 0.8}, 0.3, "blue"));
        auto cam = Camera::look_at({1.6, 0, 0.8}, {0, 0, 0.8}, 55.0, 96, 96);
        auto view = render_gt_view(scene, cam);
        int64_t inside = view.pixel_count(1);
        CHECK(inside > 200);
        for (uint32_t s : view.semantics) CHECK(s <= 1);
        // binary mask equals the indicator by definition
        auto m = view.binary_mask(1);
        for (size_t i = 0; i < m.size(); ++i) CHECK(m[i] == (view.semantics[i] == 1 ? 1.0f : 0.0f));
    }
    SUBCASE("fully occluded primitive is absent from semantics") {
        Scene scene;
        scene.seed = 1;
        scene.config = cfg;
        scene.primitives.push_back(make_sphere({0, 0, 0.8}, 0.10, "blue"));      // small, behind
        scene.primitives.push_back(make_box({0.8, 0, 0.8}, {0.4, 0.4, 0.4}, "red")); // blocks it
        auto cam = Camera::look_at({2.4, 0, 0.8}, {0, 0, 0.8}, 40.0, 96, 96);
        auto view = render_gt_view(scene, cam);
        CHECK(view.pixel_count(1) == 0);
        CHECK(view.pixel_count(2) > 0);
    }
}

TEST_CASE("oracle embeddings") {
    SUBCASE("deterministic and unit norm") {
        auto a = oracle_embedding({"red", "sphere"}, 9, 32);
        auto b = oracle_embedding({"red", "sphere"}, 9, 32);
        CHECK(a == b);
        double norm = 0;
        for (float v : a) norm += static_cast<double>(v) * v;
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("shared color with different shapes gives cosine strictly in (0,1)") {
        auto a = oracle_embedding({"red", "sphere"}, 9, 32);
        auto b = oracle_embedding({"red", "box"}, 9, 32);
        double cos = 0;
        for (size_t i = 0; i < a.size(); ++i) cos += static_cast<double>(a[i]) * b[i];
        CHECK(cos > 0.0);
        CHECK(cos < 1.0);
    }
    SUBCASE("attribute-disjoint instances stay nearly orthogonal over 1000 pairs") {
        const std::vector<std::string> colors = {"red", "green", "blue", "yellow",
                                                 "purple", "cyan", "orange", "white"};
        Rng rng(4);
        for (int trial = 0; trial < 1000; ++trial) {
            auto c1 = colors[rng.below(colors.size())];
            auto c2 = colors[rng.below(colors.size())];
            while (c2 == c1) c2 = colors[rng.below(colors.size())];
            bool sphere1 = rng.below(2);
            auto a = oracle_embedding({c1, sphere1 ? "sphere" : "box"}, 11, 32);
            auto b = oracle_embedding({c2, sphere1 ? "box" : "sphere"}, 11, 32);
            double cos = 0;
            for (size_t i = 0; i < a.size(); ++i) cos += static_cast<double>(a[i]) * b[i];
            CHECK(std::abs(cos) <= 0.1);
        }
    }
}

TEST_CASE("instance sampling filters and never takes everything") {
    CHECK(min_pixels_for(512, 512) == 1024);
    CHECK(min_pixels_for(128, 128) == 64);

    LabeledView view;
    view.width = view.height = 128;
    view.num_instances = 3;
    view.embed_dim = 4;
    view.semantics.assign(128 * 128, 0);
    // instance 1: 1000 px at 512x512-rate would survive, but here the
    // threshold is 64: give it 40 px so it is filtered out
    for (int i = 0; i < 40; ++i) view.semantics[static_cast<size_t>(i)] = 1;
    for (int i = 0; i < 500; ++i) view.semantics[static_cast<size_t>(2000 + i)] = 2;
    for (int i = 0; i < 500; ++i) view.semantics[static_cast<size_t>(4000 + i)] = 3;
    view.index2sem.assign(static_cast<size_t>(3 * 4), 0.5f);

    Rng rng(3);
    bool saw_one = false;
    for (int trial = 0; trial < 50; ++trial) {
        auto s = sample_instances(view, rng, 8);
        REQUIRE(!s.instance_ids.empty());
        // instance 1 never survives the pixel filter; never take all survivors
        for (uint32_t id : s.instance_ids) CHECK(id != 1);
        CHECK(s.instance_ids.size() == 1); // 2 survivors -> strict subset of size 1
        saw_one = true;
        CHECK(s.token_of.size() == s.instance_ids.size());
    }
    CHECK(saw_one);

    SUBCASE("filtered-out at 512x512 when below 1024 pixels") {
        LabeledView big;
        big.width = big.height = 512;
        big.num_instances = 2;
        big.embed_dim = 4;
        big.semantics.assign(512 * 512, 0);
        for (int i = 0; i < 1000; ++i) big.semantics[static_cast<size_t>(i)] = 1; // under 1024
        for (int i = 0; i < 3000; ++i) big.semantics[static_cast<size_t>(10000 + i)] = 2;
        big.index2sem.assign(static_cast<size_t>(2 * 4), 0.5f);
        Rng rng2(1);
        auto s = sample_instances(big, rng2, 8);
        REQUIRE(s.instance_ids.size() == 1);
        CHECK(s.instance_ids[0] == 2);
    }
    SUBCASE("zero surviving instances yields an empty sample") {
        LabeledView empty;
        empty.width = empty.height = 64;
        empty.num_instances = 1;
        empty.embed_dim = 4;
        empty.semantics.assign(64 * 64, 0);
        empty.index2sem.assign(4, 0.1f);
        Rng rng3(1);
        CHECK(sample_instances(empty, rng3, 8).instance_ids.empty());
    }
}

TEST_CASE("cache round-trip is bitwise and failures are structured") {
    SceneConfig cfg;
    cfg.image_size = 64;
    cfg.min_primitives = cfg.max_primitives = 3;
    auto scene = generate_scene(21, cfg);
    Rng rng(2);
    auto cam = sample_cameras(scene, 1, rng)[0];
    auto view = render_gt_view(scene, cam);

    auto dir = temp_dir("cache");
    write_cache(view, dir, "v0");
    auto back = read_cache(dir, "v0");
    CHECK(back.image == view.image);
    CHECK(back.semantics == view.semantics);
    CHECK(back.index2sem == view.index2sem);
    CHECK(back.camera.to_json() == view.camera.to_json());

    SUBCASE("truncated payload reports expected vs actual length") {
        auto path = dir / "v0.image.bin";
        fs::resize_file(path, 100);
        try {
            read_cache(dir, "v0");
            FAIL("expected throw");
        } catch (const io::ParseError& e) {
            std::string msg = e.what();
            CHECK(msg.find("expected") != std::string::npos);
            CHECK(msg.find("100") != std::string::npos);
        }
    }
    SUBCASE("corrupt header reports a byte offset") {
        io::write_text_file(dir / "v0.semantics.json", "{\"name\": \"semantics\", ");
        try {
            read_cache(dir, "v0");
            FAIL("expected throw");
        } catch (const io::ParseError& e) {
            CHECK(std::string(e.what()).find("byte") != std::string::npos);
        }
    }
}

TEST_CASE("cache decomposition storage stays near the index-map size") {
    // 10-instance 256^2 view: semantics ~ 256^2*4 bytes, embeddings 10*F*4,
    // far below a dense 256^2*F*4 feature map
    LabeledView view;
    view.width = view.height = 256;
    view.num_instances = 10;
    view.embed_dim = 32;
    view.camera = Camera::look_at({2, 0, 1}, {0, 0, 0.5}, 55, 256, 256);
    view.image.assign(256 * 256 * 3, 0.25f);
    view.semantics.assign(256 * 256, 1u);
    view.index2sem.assign(10 * 32, 0.1f);
    auto dir = temp_dir("storage");
    write_cache(view, dir, "v0");
    const auto sem_bytes = fs::file_size(dir / "v0.semantics.bin");
    const auto emb_bytes = fs::file_size(dir / "v0.index2semantics.bin");
    CHECK(sem_bytes == 256 * 256 * 4);
    CHECK(emb_bytes == 10 * 32 * 4);
    const size_t dense = 256 * 256 * 32 * 4;
    CHECK(sem_bytes + emb_bytes < dense / 10);
}

TEST_CASE("3D point labels partition the cloud and project consistently") {
    SceneConfig cfg;
    cfg.image_size = 128;
    cfg.min_primitives = cfg.max_primitives = 4;
    cfg.density = 2000.0;
    auto scene = generate_scene(33, cfg);
    auto cloud = sample_pointcloud(scene, cfg.density);
    auto labels = assign_points_to_instances(scene, cloud);
    REQUIRE(labels.size() == cloud.size());
    for (uint32_t l : labels) {
        CHECK(l >= 1);
        CHECK(l <= scene.primitives.size());
    }

    // project per-point masks into a view; IoU with semantics >= 0.7
    Rng rng(8);
    auto cam = sample_cameras(scene, 1, rng)[0];
    std::vector<float> depth;
    auto view = render_gt_view(scene, cam, &depth);
    const Eigen::Vector3d origin = cam.center();
    for (uint32_t id = 1; id <= scene.primitives.size(); ++id) {
        if (view.pixel_count(id) < 200) continue; // tiny/occluded in this view
        std::vector<char> painted(static_cast<size_t>(128 * 128), 0);
        for (size_t i = 0; i < cloud.size(); ++i) {
            if (labels[i] != id) continue;
            const Eigen::Vector3d p(cloud.points[i][0], cloud.points[i][1], cloud.points[i][2]);
            const Eigen::Vector3d pc = cam.to_camera(p);
            if (pc.z() <= 0.05) continue;
            const int px = static_cast<int>(std::lround(cam.fx * pc.x() / pc.z() + cam.cx));
            const int py = static_cast<int>(std::lround(cam.fy * pc.y() / pc.z() + cam.cy));
            if (px < 0 || px >= 128 || py < 0 || py >= 128) continue;
            const double dist = (p - origin).norm();
            const float dbuf = depth[static_cast<size_t>(py * 128 + px)];
            if (dbuf > 0 && dist > dbuf + 0.07) continue; // occluded point
            // paint a 3x3 footprint per point; the 5cm spacing projects to
            // about 2px here so this closes gaps without inflating the union
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int qx = px + dx, qy = py + dy;
                    if (qx >= 0 && qx < 128 && qy >= 0 && qy < 128)
                        painted[static_cast<size_t>(qy * 128 + qx)] = 1;
                }
        }
        int64_t inter = 0, uni = 0;
        for (size_t i = 0; i < painted.size(); ++i) {
            const bool a = painted[i] != 0;
            const bool b = view.semantics[i] == id;
            inter += (a && b);
            uni += (a || b);
        }
        REQUIRE(uni > 0);
        CHECK(static_cast<double>(inter) / static_cast<double>(uni) >= 0.7);
    }
}

TEST_CASE("referential templates are unambiguous") {
    SUBCASE("unique red sphere gets a color+shape template") {
        Scene scene;
        scene.seed = 1;
        scene.config.embed_seed = 5;
        scene.primitives.push_back(make_sphere({0.4, 0, 0.3}, 0.2, "red"));
        scene.primitives.push_back(make_box({-0.4, 0, 0.3}, {0.2, 0.2, 0.2}, "blue"));
        auto qs = build_finetune_queries(scene);
        REQUIRE(qs.size() == 2);
        CHECK(qs[0].words == std::vector<std::string>{"red", "sphere"});
        CHECK(qs[0].target_instance == 1);
    }
    SUBCASE("two same-colored boxes disambiguate via nearest-to") {
        Scene scene;
        scene.seed = 1;
        scene.config.embed_seed = 5;
        scene.primitives.push_back(make_box({0.2, 0, 0.3}, {0.15, 0.15, 0.15}, "red"));
        scene.primitives.push_back(make_box({-0.9, 0, 0.3}, {0.15, 0.15, 0.15}, "red"));
        scene.primitives.push_back(make_sphere({0.6, 0, 0.3}, 0.15, "blue"));
        auto qs = build_finetune_queries(scene);
        bool found_nearest = false;
        for (const auto& q : qs) {
            if (q.words == std::vector<std::string>{"box", "nearest-to", "blue", "sphere"}) {
                CHECK(q.target_instance == 1); // the box at x=0.2 is nearer to the sphere
                found_nearest = true;
            }
        }
        CHECK(found_nearest);
    }
    SUBCASE("generated scenes only emit templates whose target is unique") {
        SceneConfig cfg;
        cfg.min_primitives = 3;
        cfg.max_primitives = 6;
        for (uint64_t seed = 0; seed < 100; ++seed) {
            auto scene = generate_scene(seed, cfg);
            for (const auto& q : build_finetune_queries(scene)) {
                CHECK(q.target_instance >= 1);
                CHECK(q.target_instance <= static_cast<int>(scene.primitives.size()));
                CHECK(!q.words.empty());
                CHECK(!q.embedding.empty());
            }
        }
    }
}

TEST_CASE("dataset generation round-trips through the manifest") {
    auto root = temp_dir("dataset");
    SceneConfig cfg;
    cfg.image_size = 48;
    cfg.views_per_scene = 2;
    cfg.min_primitives = 2;
    cfg.max_primitives = 3;
    cfg.density = 800;
    generate_dataset(root, 99, 3, cfg, 1);

    auto manifest = read_manifest(root);
    CHECK(manifest.num_scenes == 3);
    REQUIRE(manifest.scenes.size() == 3);
    for (int i = 0; i < 3; ++i) {
        auto data = load_scene(root, manifest, i);
        CHECK(data.cloud.size() > 0);
        CHECK(data.point_instance.size() == data.cloud.size());
        CHECK(data.num_views == 2);
        auto v = data.view(0);
        CHECK(v.width == 48);
        CHECK(v.num_instances == static_cast<int64_t>(data.scene.primitives.size()));
    }

    SUBCASE("regeneration is bitwise identical") {
        auto root2 = temp_dir("dataset2");
        generate_dataset(root2, 99, 3, cfg, 1);
        for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator();
             ++it) {
            if (!it->is_regular_file()) continue;
            auto rel = fs::relative(it->path(), root);
            auto a = io::read_text_file(it->path());
            auto b = io::read_text_file(root2 / rel);
            CHECK(a == b);
        }
    }
}
