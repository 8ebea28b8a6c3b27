#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <splatground/model.hpp>

using namespace sg;
using namespace sg::model;

namespace {

PointCloud random_cloud(Rng& rng, size_t n, double lo = -0.8, double hi = 0.8) {
    PointCloud c;
    for (size_t i = 0; i < n; ++i) {
        c.points.push_back({static_cast<float>(rng.uniform(lo, hi)),
                            static_cast<float>(rng.uniform(lo, hi)),
                            static_cast<float>(rng.uniform(0.0, 1.2))});
        c.colors.push_back({static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                            static_cast<float>(rng.uniform())});
    }
    return c;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.proposals = 4;
    cfg.decoder_layers = 1;
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.ffn = 16;
    cfg.encoder_dim = 8;
    cfg.feature_dim = 4;
    cfg.query_dim = 4;
    cfg.grid = 8;
    cfg.unet_levels = 1;
    cfg.unet_base_channels = 4;
    cfg.decode_hidden = 12;
    return cfg;
}

} // namespace

TEST_CASE("encode_points emits one 96-dim feature row per point") {
    ModelConfig cfg;
    cfg.grid = 16;
    Model<float> model(cfg, 1);
    Rng rng(2);
    auto cloud = random_cloud(rng, 200);
    auto frame = SceneFrame::from_cloud(cloud);
    auto feats = model.encode_points(cloud, frame);
    CHECK(feats.shape() == Shape{200, 96});
    for (float v : feats.values()) CHECK(std::isfinite(v));

    SUBCASE("empty cloud is an error") {
        PointCloud empty;
        CHECK_THROWS_AS(SceneFrame::from_cloud(empty), Error);
        CHECK_THROWS_AS(model.encode_points(empty, frame), Error);
    }
}

TEST_CASE("encode_points is bitwise permutation-equivariant") {
    ModelConfig cfg;
    cfg.grid = 16;
    Model<float> model(cfg, 3);
    Rng rng(4);
    const size_t n = 120;
    auto cloud = random_cloud(rng, n);
    auto frame = SceneFrame::from_cloud(cloud);
    auto feats = model.encode_points(cloud, frame);

    std::vector<size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0u);
    for (size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    PointCloud shuffled;
    for (size_t i = 0; i < n; ++i) {
        shuffled.points.push_back(cloud.points[perm[i]]);
        shuffled.colors.push_back(cloud.colors[perm[i]]);
    }
    auto feats2 = model.encode_points(shuffled, SceneFrame::from_cloud(shuffled));
    const int64_t d = feats.dim(1);
    for (size_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
            CHECK(feats2.values()[i * static_cast<size_t>(d) + static_cast<size_t>(j)] ==
                  feats.values()[perm[i] * static_cast<size_t>(d) + static_cast<size_t>(j)]);
}

TEST_CASE("a far-away point barely moves features outside its receptive field") {
    // shallow UNet so the receptive field is well under the grid extent
    ModelConfig cfg;
    cfg.grid = 32;
    cfg.unet_levels = 1;
    cfg.unet_base_channels = 4;
    Model<float> model(cfg, 5);

    PointCloud base;
    base.points = {{0.0f, 0.0f, 0.0f}, {1.0f, 1.0f, 1.0f}}; // frame anchors
    base.colors = {{0.5f, 0.5f, 0.5f}, {0.5f, 0.5f, 0.5f}};
    Rng rng(6);
    const size_t cluster = 30;
    for (size_t i = 0; i < cluster; ++i) {
        base.points.push_back({static_cast<float>(0.15 + 0.04 * rng.uniform()),
                               static_cast<float>(0.15 + 0.04 * rng.uniform()),
                               static_cast<float>(0.15 + 0.04 * rng.uniform())});
        base.colors.push_back({1.0f, 0.2f, 0.1f});
    }
    PointCloud with_far = base;
    with_far.points.push_back({0.85f, 0.85f, 0.85f});
    with_far.colors.push_back({0.1f, 0.9f, 0.1f});

    auto fa = model.encode_points(base, SceneFrame::from_cloud(base));
    auto fb = model.encode_points(with_far, SceneFrame::from_cloud(with_far));
    double max_diff = 0;
    const size_t d = static_cast<size_t>(fa.dim(1));
    for (size_t i = 2; i < 2 + cluster; ++i) // cluster rows only
        for (size_t j = 0; j < d; ++j)
            max_diff = std::max(max_diff, std::abs(static_cast<double>(fa.values()[i * d + j]) -
                                                   fb.values()[i * d + j]));
    CHECK(max_diff <= 1e-6);
}

TEST_CASE("decode_gaussians contract") {
    ModelConfig cfg;
    cfg.grid = 16;
    Model<float> model(cfg, 7);
    Rng rng(8);
    auto cloud = random_cloud(rng, 1000);
    auto frame = SceneFrame::from_cloud(cloud);
    auto feats = model.encode_points(cloud, frame);
    auto gs = model.decode_gaussians(feats, cloud);

    SUBCASE("one Gaussian per point, 13+F channels") {
        CHECK(gs.position.shape() == Shape{1000, 3});
        CHECK(gs.cov_params.shape() == Shape{1000, 6});
        CHECK(gs.color.shape() == Shape{1000, 3});
        CHECK(gs.opacity.shape() == Shape{1000, 1});
        CHECK(gs.feature.shape() == Shape{1000, cfg.feature_dim});
        // 3 offset + 6 cov + 3 color + 1 opacity = 13 channels plus F features
        CHECK(3 + 6 + 3 + 1 == 13);
    }
    SUBCASE("ranges: color/opacity in (0,1), features unit rows") {
        for (float v : gs.color.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        for (float v : gs.opacity.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
        for (int64_t i = 0; i < 1000; ++i) {
            double norm = 0;
            for (int64_t j = 0; j < cfg.feature_dim; ++j) {
                float v = gs.feature.values()[static_cast<size_t>(i * cfg.feature_dim + j)];
                norm += static_cast<double>(v) * v;
            }
            CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-4));
        }
    }
    SUBCASE("offsets stay within the tanh bound") {
        for (int64_t i = 0; i < 1000; ++i)
            for (int a = 0; a < 3; ++a) {
                const float off = gs.position.values()[static_cast<size_t>(i * 3 + a)] -
                                  cloud.points[static_cast<size_t>(i)][static_cast<size_t>(a)];
                CHECK(std::abs(off) <= static_cast<float>(cfg.max_offset) + 1e-6f);
            }
    }
    SUBCASE("zeroed final layer gives zero offsets") {
        auto w = model.param("decode.mlp2.w");
        auto b = model.param("decode.mlp2.b");
        std::fill(w.values_mut().begin(), w.values_mut().end(), 0.0f);
        std::fill(b.values_mut().begin(), b.values_mut().end(), 0.0f);
        auto gs0 = model.decode_gaussians(feats, cloud);
        for (int64_t i = 0; i < 1000; ++i)
            for (int a = 0; a < 3; ++a)
                CHECK(gs0.position.values()[static_cast<size_t>(i * 3 + a)] ==
                      cloud.points[static_cast<size_t>(i)][static_cast<size_t>(a)]);
    }
}

TEST_CASE("ground produces the declared shapes and handles errors") {
    ModelConfig cfg;
    cfg.grid = 16;
    cfg.proposals = 16;
    Model<float> model(cfg, 9);
    Rng rng(10);
    auto cloud = random_cloud(rng, 500);
    auto frame = SceneFrame::from_cloud(cloud);
    auto queries = l2_normalize_lastdim(TensorF::randn({5, cfg.query_dim}, rng)).detach();

    auto feats = model.encode_points(cloud, frame);
    auto gs = model.decode_gaussians(feats, cloud);
    auto out = model.ground(gs.feature, cloud, frame, queries);
    CHECK(out.mask_logits.shape() == Shape{16, 500});
    CHECK(out.corr_logits.shape() == Shape{16, 6}); // |Q| + no-match

    SUBCASE("zero queries is an error") {
        auto empty = TensorF::zeros({0, cfg.query_dim});
        CHECK_THROWS_AS(model.ground(gs.feature, cloud, frame, empty), Error);
    }
    SUBCASE("duplicate Gaussian tokens produce identical mask columns") {
        PointCloud two;
        two.points = {{0.1f, 0.2f, 0.3f}, {0.1f, 0.2f, 0.3f}};
        two.colors = {{0.5f, 0.5f, 0.5f}, {0.5f, 0.5f, 0.5f}};
        auto gf = TensorF::from({2, cfg.feature_dim},
                                [&] {
                                    std::vector<float> v(static_cast<size_t>(2 * cfg.feature_dim));
                                    for (int64_t j = 0; j < cfg.feature_dim; ++j)
                                        v[static_cast<size_t>(j)] = v[static_cast<size_t>(cfg.feature_dim + j)] =
                                            static_cast<float>(rng.normal());
                                    return v;
                                }());
        auto out2 = model.ground(gf, two, frame, queries);
        for (int64_t i = 0; i < 16; ++i)
            CHECK(out2.mask_logits.values()[static_cast<size_t>(i * 2)] ==
                  out2.mask_logits.values()[static_cast<size_t>(i * 2 + 1)]);
    }
}

TEST_CASE("forward is deterministic for a fixed seed") {
    ModelConfig cfg;
    cfg.grid = 16;
    Rng rng(11);
    auto cloud = random_cloud(rng, 150);
    auto queries = l2_normalize_lastdim(TensorF::randn({3, cfg.query_dim}, rng)).detach();
    Model<float> a(cfg, 42), b(cfg, 42);
    auto oa = a.forward(cloud, queries);
    auto ob = b.forward(cloud, queries);
    CHECK(oa.grounding.mask_logits.values() == ob.grounding.mask_logits.values());
    CHECK(oa.grounding.corr_logits.values() == ob.grounding.corr_logits.values());
    CHECK(oa.gaussians.position.values() == ob.gaussians.position.values());
}

TEST_CASE("proposal permutation at initialization permutes M and C rows") {
    ModelConfig cfg = tiny_config();
    Rng rng(12);
    auto cloud = random_cloud(rng, 60);
    auto queries = l2_normalize_lastdim(TensorD::randn({3, cfg.query_dim}, rng)).detach();

    Model<double> a(cfg, 77), b(cfg, 77);
    std::vector<int64_t> perm = {2, 0, 3, 1};
    {
        auto pa = a.param("ground.proposals");
        auto pb = b.param("ground.proposals");
        auto& vb = pb.values_mut();
        const int64_t h = cfg.hidden;
        for (int64_t i = 0; i < cfg.proposals; ++i)
            for (int64_t j = 0; j < h; ++j)
                vb[static_cast<size_t>(i * h + j)] =
                    pa.values()[static_cast<size_t>(perm[static_cast<size_t>(i)] * h + j)];
    }
    auto oa = a.forward(cloud, queries);
    auto ob = b.forward(cloud, queries);
    const int64_t n = oa.grounding.mask_logits.dim(1);
    const int64_t q1 = oa.grounding.corr_logits.dim(1);
    for (int64_t i = 0; i < cfg.proposals; ++i) {
        for (int64_t j = 0; j < n; ++j)
            CHECK(ob.grounding.mask_logits.values()[static_cast<size_t>(i * n + j)] ==
                  doctest::Approx(oa.grounding.mask_logits.values()[static_cast<size_t>(
                      perm[static_cast<size_t>(i)] * n + j)])
                      .epsilon(1e-12));
        for (int64_t j = 0; j < q1; ++j)
            CHECK(ob.grounding.corr_logits.values()[static_cast<size_t>(i * q1 + j)] ==
                  doctest::Approx(oa.grounding.corr_logits.values()[static_cast<size_t>(
                      perm[static_cast<size_t>(i)] * q1 + j)])
                      .epsilon(1e-12));
    }
}

TEST_CASE("count_parameters and persistence") {
    ModelConfig cfg;
    cfg.grid = 16;
    Model<float> model(cfg, 13);
    SUBCASE("a 64x64 linear layer with bias holds 4160 parameters") {
        CHECK(model.param("ground.gauss_head.w").numel() + model.param("ground.gauss_head.b").numel() ==
              4160);
    }
    SUBCASE("count covers every registered tensor") {
        int64_t total = 0;
        for (const auto& [name, t] : model.parameters()) total += t.numel();
        CHECK(model.count_parameters() == total);
        CHECK(total > 100000);
    }
    SUBCASE("save/load round trip preserves outputs; config mismatch rejects") {
        Rng rng(14);
        auto cloud = random_cloud(rng, 80);
        auto queries = l2_normalize_lastdim(TensorF::randn({2, cfg.query_dim}, rng)).detach();
        auto dir = std::filesystem::temp_directory_path() / "splatground_test_model";
        std::filesystem::remove_all(dir);
        model.save(dir);

        Model<float> fresh(cfg, 999);
        fresh.load(dir);
        auto oa = model.forward(cloud, queries);
        auto ob = fresh.forward(cloud, queries);
        CHECK(oa.grounding.mask_logits.values() == ob.grounding.mask_logits.values());

        ModelConfig other = cfg;
        other.hidden = 32;
        other.heads = 4;
        Model<float> wrong(other, 1);
        CHECK_THROWS_AS(wrong.load(dir), Error);
    }
}

TEST_CASE("end-to-end gradients: nonzero everywhere and match finite differences") {
    ModelConfig cfg = tiny_config();
    Model<double> model(cfg, 21);
    Rng rng(22);
    auto cloud = random_cloud(rng, 40);
    auto queries = l2_normalize_lastdim(TensorD::randn({2, cfg.query_dim}, rng)).detach();

    // fixed random linear functional over every model output
    auto frame = SceneFrame::from_cloud(cloud);
    auto run_loss = [&]() {
        auto out = model.forward(cloud, queries);
        Rng wrng(5);
        auto wsum = [&](const Tensor<double>& t) {
            auto w = TensorD::rand_uniform(t.shape(), wrng, -1.0, 1.0);
            return sum_all(mul(t, w));
        };
        auto loss = wsum(out.grounding.mask_logits);
        loss = add(loss, wsum(out.grounding.corr_logits));
        loss = add(loss, wsum(out.gaussians.position));
        loss = add(loss, wsum(out.gaussians.cov_params));
        loss = add(loss, wsum(out.gaussians.color));
        loss = add(loss, wsum(out.gaussians.opacity));
        loss = add(loss, wsum(out.gaussians.feature));
        return loss;
    };
    (void)frame;

    auto loss = run_loss();
    loss.backward();

    std::map<std::string, std::vector<double>> grads;
    for (auto& [name, t] : model.parameters()) {
        REQUIRE(t.has_grad());
        grads[name] = t.grad();
        double norm = 0;
        for (double g : t.grad()) norm += g * g;
        CHECK_MESSAGE(norm > 0.0, "dead branch at parameter ", name);
        t.zero_grad();
    }

    // sampled central differences across every parameter tensor
    Rng pick(33);
    double max_err = 0;
    const double eps = 1e-5;
    for (auto& [name, t] : model.parameters()) {
        const int64_t n = t.numel();
        const int probes = 4;
        for (int p = 0; p < probes; ++p) {
            const auto idx = static_cast<size_t>(pick.below(static_cast<uint64_t>(n)));
            const double orig = t.values()[idx];
            double fp, fm;
            {
                NoGradGuard ng;
                t.values_mut()[idx] = orig + eps;
                fp = run_loss().item();
                t.values_mut()[idx] = orig - eps;
                fm = run_loss().item();
                t.values_mut()[idx] = orig;
            }
            const double num = (fp - fm) / (2 * eps);
            const double ana = grads[name][idx];
            max_err = std::max(max_err, std::abs(ana - num) / std::max(1.0, std::abs(ana)));
        }
    }
    CHECK(max_err <= 1e-4);
}
