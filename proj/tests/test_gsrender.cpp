#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <splatground/gsrender.hpp>

using namespace sg;
using namespace sg::render;

namespace {

Camera axis_camera(int size = 128, double f = 100.0) {
    Camera cam;
    cam.world_to_camera.setIdentity();
    cam.fx = cam.fy = f;
    cam.cx = cam.cy = size / 2.0;
    cam.width = cam.height = size;
    return cam;
}

std::vector<double> randvec(Rng& rng, size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

} // namespace

TEST_CASE("build_covariance fixtures") {
    SUBCASE("zeros give the identity") {
        double cov6[6] = {0, 0, 0, 0, 0, 0};
        auto s = build_covariance(cov6);
        CHECK((s - Eigen::Matrix3d::Identity()).norm() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("log scale ln2 on x gives diag(4,1,1)") {
        double cov6[6] = {std::log(2.0), 0, 0, 0, 0, 0};
        auto s = build_covariance(cov6);
        CHECK(s(0, 0) == doctest::Approx(4.0));
        CHECK(s(1, 1) == doctest::Approx(1.0));
        CHECK(s(2, 2) == doctest::Approx(1.0));
        CHECK(std::abs(s(0, 1)) < 1e-12);
    }
    SUBCASE("quarter turn about z swaps the x and y scales") {
        double cov6[6] = {std::log(2.0), 0, 0, 0, 0, M_PI / 2};
        auto s = build_covariance(cov6);
        CHECK(s(0, 0) == doctest::Approx(1.0));
        CHECK(s(1, 1) == doctest::Approx(4.0));
        CHECK(s(2, 2) == doctest::Approx(1.0));
    }
}

TEST_CASE("build_covariance is SPD on random inputs") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        double cov6[6];
        for (int i = 0; i < 3; ++i) cov6[i] = rng.uniform(-6.0, 1.5);
        for (int i = 3; i < 6; ++i) cov6[i] = rng.normal();
        auto s = build_covariance(cov6);
        CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(s);
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }
}

TEST_CASE("build_covariance backward matches central differences") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        double cov6[6];
        for (int i = 0; i < 3; ++i) cov6[i] = rng.uniform(-4.0, 1.0);
        // keep rotations away from the clamp boundaries and the tiny-angle branch
        for (int i = 3; i < 6; ++i) cov6[i] = rng.uniform(-1.5, 1.5);
        Eigen::Matrix3d wmat;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) wmat(r, c) = rng.normal();
        auto loss = [&](const double* p) { return (wmat.array() * build_covariance(p).array()).sum(); };
        auto grad = build_covariance_backward(cov6, wmat);
        const double eps = 1e-6;
        for (int i = 0; i < 6; ++i) {
            double probe[6];
            std::copy_n(cov6, 6, probe);
            probe[i] = cov6[i] + eps;
            double fp = loss(probe);
            probe[i] = cov6[i] - eps;
            double fm = loss(probe);
            double num = (fp - fm) / (2 * eps);
            CHECK(std::abs(grad[static_cast<size_t>(i)] - num) /
                      std::max(1.0, std::abs(grad[static_cast<size_t>(i)])) < 1e-6);
        }
    }
}

TEST_CASE("build_covariance backward at zero rotation") {
    double cov6[6] = {0.1, -0.2, 0.3, 0, 0, 0};
    Eigen::Matrix3d wmat = Eigen::Matrix3d::Random();
    auto grad = build_covariance_backward(cov6, wmat);
    const double eps = 1e-6;
    for (int i = 0; i < 6; ++i) {
        double probe[6];
        std::copy_n(cov6, 6, probe);
        probe[i] += eps;
        double fp = (wmat.array() * build_covariance(probe).array()).sum();
        probe[i] = cov6[i] - eps;
        double fm = (wmat.array() * build_covariance(probe).array()).sum();
        CHECK(std::abs(grad[static_cast<size_t>(i)] - (fp - fm) / (2 * eps)) < 1e-6);
    }
}

TEST_CASE("project_gaussian fixtures") {
    Camera cam = axis_camera();
    SUBCASE("on-axis point lands on the principal point") {
        auto p = project_gaussian<double>(cam, {0, 0, 1}, Eigen::Matrix3d::Identity() * 1e-4);
        CHECK(p.valid);
        CHECK(p.mean_x == doctest::Approx(64.0));
        CHECK(p.mean_y == doctest::Approx(64.0));
        CHECK(p.depth == doctest::Approx(1.0));
    }
    SUBCASE("0.1m lateral offset at z=1 moves 10 pixels") {
        auto p = project_gaussian<double>(cam, {0.1, 0, 1}, Eigen::Matrix3d::Identity() * 1e-4);
        CHECK(p.mean_x == doctest::Approx(74.0));
        CHECK(p.mean_y == doctest::Approx(64.0));
    }
    SUBCASE("isotropic covariance maps to (f*sigma/z)^2 + dilation") {
        const double sigma = 0.03;
        auto p = project_gaussian<double>(cam, {0, 0, 1},
                                          Eigen::Matrix3d::Identity() * sigma * sigma);
        const double expect = 100.0 * 100.0 * sigma * sigma + kCovDilation;
        CHECK(p.cov_a == doctest::Approx(expect).epsilon(1e-9));
        CHECK(p.cov_c == doctest::Approx(expect).epsilon(1e-9));
        CHECK(std::abs(p.cov_b) < 1e-12);
    }
    SUBCASE("behind-camera point is culled, not an error") {
        auto p = project_gaussian<double>(cam, {0, 0, -1}, Eigen::Matrix3d::Identity() * 1e-4);
        CHECK_FALSE(p.valid);
    }
}

TEST_CASE("rasterize: empty scene renders background") {
    Camera cam = axis_camera(32, 30.0);
    auto pos = TensorF::zeros({0, 3});
    auto cov = TensorF::zeros({0, 6});
    auto opa = TensorF::zeros({0, 1});
    auto att = TensorF::zeros({0, 3});
    auto out = rasterize<float>(pos, cov, opa, att, cam, {0.0f, 0.0f, 0.0f});
    for (float v : out.packed.values()) CHECK(v == 0.0f);

    auto out2 = rasterize<float>(pos, cov, opa, att, cam, {0.25f, 0.5f, 0.75f});
    for (int64_t p = 0; p < 32 * 32; ++p) {
        CHECK(out2.packed.values()[static_cast<size_t>(p * 4)] == doctest::Approx(0.25));
        CHECK(out2.packed.values()[static_cast<size_t>(p * 4 + 3)] == 0.0f); // alpha
    }
}

TEST_CASE("rasterize: single opaque on-axis gaussian covers the center pixel") {
    Camera cam = axis_camera();
    auto pos = TensorF::from({1, 3}, {0, 0, 1});
    float ls = std::log(0.05f);
    auto cov = TensorF::from({1, 6}, {ls, ls, ls, 0, 0, 0});
    auto opa = TensorF::from({1, 1}, {0.999f});
    auto att = TensorF::from({1, 3}, {1, 0, 0});
    auto out = rasterize<float>(pos, cov, opa, att, cam, {0, 0, 0});
    const int64_t pix = (64 * 128 + 64) * 4;
    CHECK(out.packed.values()[static_cast<size_t>(pix)] == doctest::Approx(0.999).epsilon(1e-3));
    CHECK(out.packed.values()[static_cast<size_t>(pix + 1)] == doctest::Approx(0.0));
    CHECK(out.packed.values()[static_cast<size_t>(pix + 3)] == doctest::Approx(0.999).epsilon(1e-3));
}

TEST_CASE("rasterize: front-to-back occlusion") {
    Camera cam = axis_camera();
    float ls = std::log(0.08f);
    auto pos = TensorF::from({2, 3}, {0, 0, 2, 0, 0, 1}); // blue behind, red in front
    auto cov = TensorF::from({2, 6}, {ls, ls, ls, 0, 0, 0, ls, ls, ls, 0, 0, 0});
    auto opa = TensorF::from({2, 1}, {0.999f, 0.999f});
    auto att = TensorF::from({2, 3}, {0, 0, 1, 1, 0, 0});
    auto out = rasterize<float>(pos, cov, opa, att, cam, {0, 0, 0});
    const int64_t pix = (64 * 128 + 64) * 4;
    CHECK(out.packed.values()[static_cast<size_t>(pix)] > 0.9f);       // red wins
    CHECK(out.packed.values()[static_cast<size_t>(pix + 2)] < 0.01f);  // blue occluded
}

TEST_CASE("rasterize: alpha non-decreasing in opacity; masks stay in [0,1]") {
    Camera cam = axis_camera(64, 50.0);
    Rng rng(9);
    float ls = std::log(0.2f);
    auto pos = TensorF::from({2, 3}, {0.1f, 0, 1.5f, -0.2f, 0.1f, 2.0f});
    auto cov = TensorF::from({2, 6}, {ls, ls, ls, 0, 0, 0, ls, ls, ls, 0, 0, 0});
    auto att = TensorF::from({2, 2}, {0.7f, 1.0f, 0.3f, 0.0f}); // mask-probability channels
    float prev_alpha_sum = -1;
    for (float o : {0.1f, 0.4f, 0.8f}) {
        auto opa = TensorF::from({2, 1}, {o, 0.5f});
        auto out = rasterize<float>(pos, cov, opa, att, cam, {0, 0});
        float asum = 0;
        for (int64_t p = 0; p < 64 * 64; ++p) {
            float m0 = out.packed.values()[static_cast<size_t>(p * 3)];
            float m1 = out.packed.values()[static_cast<size_t>(p * 3 + 1)];
            float al = out.packed.values()[static_cast<size_t>(p * 3 + 2)];
            CHECK(m0 >= 0.0f);
            CHECK(m0 <= 1.0f);
            CHECK(m1 >= 0.0f);
            CHECK(m1 <= 1.0f);
            CHECK(al >= 0.0f);
            CHECK(al <= 1.0f);
            asum += al;
        }
        CHECK(asum >= prev_alpha_sum);
        prev_alpha_sum = asum;
    }
}

TEST_CASE("rasterize adjoint: background-only pixels give zero position grads") {
    Camera cam = axis_camera(32, 40.0);
    float ls = std::log(0.02f);
    auto pos = TensorF::from({1, 3}, {-0.3f, 0, 1}).set_requires_grad(true); // left side
    auto cov = TensorF::from({1, 6}, {ls, ls, ls, 0, 0, 0});
    auto opa = TensorF::from({1, 1}, {0.9f});
    auto att = TensorF::from({1, 1}, {1.0f});
    auto out = rasterize<float>(pos, cov, opa, att, cam, {0.0f});
    // seed only a far-right pixel (gaussian projects near x=16-0.3*40=4)
    std::vector<float> seed(out.packed.values().size(), 0.0f);
    seed[static_cast<size_t>((16 * 32 + 30) * 2)] = 1.0f;
    out.packed.backward(TensorF::from(out.packed.shape(), seed));
    for (float g : pos.grad()) CHECK(g == 0.0f);
}

TEST_CASE("rasterize adjoint: d(pixel)/d(attr) at the mean equals alpha") {
    Camera cam = axis_camera(64, 50.0);
    float ls = std::log(0.1f);
    auto pos = TensorF::from({1, 3}, {0, 0, 1});
    auto cov = TensorF::from({1, 6}, {ls, ls, ls, 0, 0, 0});
    auto opa = TensorF::from({1, 1}, {0.7f});
    auto att = TensorF::from({1, 1}, {0.5f}).set_requires_grad(true);
    auto out = rasterize<float>(pos, cov, opa, att, cam, {0.0f});
    std::vector<float> seed(out.packed.values().size(), 0.0f);
    seed[static_cast<size_t>((32 * 64 + 32) * 2)] = 1.0f; // center pixel, channel 0
    out.packed.backward(TensorF::from(out.packed.shape(), seed));
    CHECK(att.grad()[0] == doctest::Approx(0.7).epsilon(1e-4)); // alpha * T, T = 1
}

TEST_CASE("rasterize gradcheck: full composite against central differences") {
    Rng rng(123);
    Camera cam = axis_camera(16, 20.0);
    const int64_t n = 5;
    std::vector<double> pos, cov, opa, att;
    for (int64_t g = 0; g < n; ++g) {
        pos.push_back(rng.uniform(-0.4, 0.4));
        pos.push_back(rng.uniform(-0.4, 0.4));
        pos.push_back(rng.uniform(1.2, 2.5));
        for (int i = 0; i < 3; ++i) cov.push_back(rng.uniform(std::log(0.05), std::log(0.3)));
        for (int i = 0; i < 3; ++i) cov.push_back(rng.uniform(-1.2, 1.2));
        opa.push_back(rng.uniform(0.15, 0.85));
        att.push_back(rng.uniform(0.1, 0.9));
        att.push_back(rng.uniform(0.1, 0.9));
    }
    auto wsum = randvec(rng, static_cast<size_t>(16 * 16 * 3), -1.0, 1.0);
    auto f = [&](std::vector<TensorD>& in) {
        RasterizeOptions opts;
        opts.exact = true;
        auto out = rasterize<double>(in[0], in[1], in[2], in[3], cam, {0.3, 0.05}, opts);
        auto w = TensorD::from(out.packed.shape(), wsum);
        return sum_all(mul(out.packed, w));
    };
    double err = gradcheck(f,
                           {{{n, 3}, pos}, {{n, 6}, cov}, {{n, 1}, opa}, {{n, 2}, att}}, 1e-5);
    CHECK(err <= 1e-4);
    // analytic gradients should be far better than the spec gate
    CHECK(err <= 1e-6);
}

TEST_CASE("rasterize: fast mode tracks exact mode") {
    Rng rng(77);
    Camera cam = axis_camera(48, 45.0);
    const int64_t n = 12;
    std::vector<float> pos, cov, opa, att;
    for (int64_t g = 0; g < n; ++g) {
        pos.push_back(static_cast<float>(rng.uniform(-0.5, 0.5)));
        pos.push_back(static_cast<float>(rng.uniform(-0.5, 0.5)));
        pos.push_back(static_cast<float>(rng.uniform(1.0, 3.0)));
        for (int i = 0; i < 3; ++i) cov.push_back(static_cast<float>(rng.uniform(std::log(0.05), std::log(0.25))));
        for (int i = 0; i < 3; ++i) cov.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
        opa.push_back(static_cast<float>(rng.uniform(0.2, 0.95)));
        for (int i = 0; i < 3; ++i) att.push_back(static_cast<float>(rng.uniform(0.0, 1.0)));
    }
    auto run = [&](bool exact) {
        RasterizeOptions opts;
        opts.exact = exact;
        return rasterize<float>(TensorF::from({n, 3}, pos), TensorF::from({n, 6}, cov),
                                TensorF::from({n, 1}, opa), TensorF::from({n, 3}, att), cam,
                                {0.1f, 0.1f, 0.1f}, opts)
            .packed.values();
    };
    auto fast = run(false);
    auto exact = run(true);
    float linf = 0;
    for (size_t i = 0; i < fast.size(); ++i) linf = std::max(linf, std::abs(fast[i] - exact[i]));
    CHECK(linf < 0.05f);
}

TEST_CASE("rasterize: 2x render box-downsamples close to 1x for smooth scenes") {
    Camera cam1 = axis_camera(32, 25.0);
    Camera cam2 = cam1;
    cam2.fx *= 2;
    cam2.fy *= 2;
    cam2.cx = 2 * cam1.cx + 0.5; // align 2x2 box centers with 1x samples
    cam2.cy = 2 * cam1.cy + 0.5;
    cam2.width *= 2;
    cam2.height *= 2;
    float ls = std::log(0.3f);
    auto pos = TensorF::from({2, 3}, {0.0f, 0.1f, 1.6f, -0.2f, -0.1f, 2.2f});
    auto cov = TensorF::from({2, 6}, {ls, ls, ls, 0, 0, 0, ls, ls, ls, 0.3f, 0.2f, 0.1f});
    auto opa = TensorF::from({2, 1}, {0.6f, 0.5f});
    auto att = TensorF::from({2, 1}, {0.9f, 0.4f});
    auto r1 = rasterize<float>(pos, cov, opa, att, cam1, {0.0f}).packed.values();
    auto r2 = rasterize<float>(pos, cov, opa, att, cam2, {0.0f}).packed.values();
    float linf = 0;
    for (int64_t y = 0; y < 32; ++y)
        for (int64_t x = 0; x < 32; ++x) {
            float acc = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    acc += r2[static_cast<size_t>(((2 * y + dy) * 64 + (2 * x + dx)) * 2)];
            float ref = r1[static_cast<size_t>((y * 32 + x) * 2)];
            linf = std::max(linf, std::abs(acc / 4 - ref));
        }
    CHECK(linf <= 0.1f);
}

TEST_CASE("rasterize backward without forward state is an error") {
    Camera cam = axis_camera(8, 10.0);
    render::detail::RasterizeOp<float> op(cam, {0.0f}, {});
    std::vector<float> g(8 * 8 * 2, 0.0f);
    CHECK_THROWS_AS(op.backward(g, {}), Error);
}
