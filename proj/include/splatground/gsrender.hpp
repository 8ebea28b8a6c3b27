#pragma once

// Differentiable 3D Gaussian rasterizer.
//
// Forward: EWA perspective splatting with a global per-frame depth sort and
// front-to-back alpha compositing of arbitrary per-Gaussian attribute
// channels. Backward: hand-written adjoint through compositing, the 2x2
// conic, the projection Jacobian and the Rodrigues covariance build. The
// sort order is held constant in the adjoint.
//
// Two modes:
//  - fast (training): 3-sigma screen bounding boxes, alpha floor 1/255,
//    early stop at transmittance < 1e-4.
//  - exact (verification): every Gaussian visits every pixel and no
//    stop/floor heuristics, so central finite differences are smooth.

#include <array>
#include <atomic>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include <splatground/camera.hpp>
#include <splatground/tensor.hpp>

namespace sg::render {

inline constexpr double kNearPlane = 0.05;
inline constexpr double kCovDilation = 0.3;
inline constexpr double kAlphaClamp = 0.999;
inline constexpr double kAlphaFloor = 1.0 / 255.0;
inline constexpr double kEarlyStopT = 1e-4;
inline constexpr double kLogScaleMin = -8.0;
inline constexpr double kLogScaleMax = 2.0;

// forward-call instrumentation (used by trainer contract tests)
inline std::atomic<uint64_t>& rasterize_forward_calls() {
    static std::atomic<uint64_t> c{0};
    return c;
}

// ---------------------------------------------------------------------------
// covariance build: cov6 = (log_sx, log_sy, log_sz, ax, ay, az)
// ---------------------------------------------------------------------------

template <class T>
Eigen::Matrix<T, 3, 3> rodrigues(const Eigen::Matrix<T, 3, 1>& a) {
    using Mat3 = Eigen::Matrix<T, 3, 3>;
    const T theta2 = a.squaredNorm();
    Mat3 ax;
    ax << T(0), -a.z(), a.y(), a.z(), T(0), -a.x(), -a.y(), a.x(), T(0);
    T s, c2;
    if (theta2 < T(1e-8)) {
        s = T(1) - theta2 / T(6);
        c2 = T(0.5) - theta2 / T(24);
    } else {
        const T theta = std::sqrt(theta2);
        s = std::sin(theta) / theta;
        c2 = (T(1) - std::cos(theta)) / theta2;
    }
    return Mat3::Identity() + s * ax + c2 * (ax * ax);
}

template <class T>
std::array<T, 3> clamped_log_scales(const T* cov6) {
    std::array<T, 3> s;
    for (int i = 0; i < 3; ++i)
        s[static_cast<size_t>(i)] =
            std::min(static_cast<T>(kLogScaleMax), std::max(static_cast<T>(kLogScaleMin), cov6[i]));
    return s;
}

// Sigma = R diag(exp(2 s)) R^T, log-scales clamped to [-8, 2].
template <class T>
Eigen::Matrix<T, 3, 3> build_covariance(const T* cov6) {
    const auto s = clamped_log_scales(cov6);
    Eigen::Matrix<T, 3, 1> axis(cov6[3], cov6[4], cov6[5]);
    Eigen::Matrix<T, 3, 3> r = rodrigues(axis);
    Eigen::Matrix<T, 3, 1> d(std::exp(T(2) * s[0]), std::exp(T(2) * s[1]), std::exp(T(2) * s[2]));
    return r * d.asDiagonal() * r.transpose();
}

// d<L>/d(cov6) from an (unsymmetrized) upstream gradient w.r.t. Sigma.
template <class T>
std::array<T, 6> build_covariance_backward(const T* cov6, const Eigen::Matrix<T, 3, 3>& g_sigma) {
    using Mat3 = Eigen::Matrix<T, 3, 3>;
    using Vec3 = Eigen::Matrix<T, 3, 1>;
    const auto s = clamped_log_scales(cov6);
    Vec3 axis(cov6[3], cov6[4], cov6[5]);
    Mat3 r = rodrigues(axis);
    Vec3 dvec(std::exp(T(2) * s[0]), std::exp(T(2) * s[1]), std::exp(T(2) * s[2]));

    // Sigma = R D R^T:  dL/dR = (G + G^T) R D;  dL/dD = R^T G R (diagonal part)
    Mat3 g_r = (g_sigma + g_sigma.transpose()) * r * dvec.asDiagonal();
    Mat3 rtgr = r.transpose() * g_sigma * r;

    std::array<T, 6> grad{};
    for (int k = 0; k < 3; ++k) {
        const bool clamped = cov6[k] <= static_cast<T>(kLogScaleMin) ||
                             cov6[k] >= static_cast<T>(kLogScaleMax);
        grad[static_cast<size_t>(k)] = clamped ? T(0) : rtgr(k, k) * T(2) * dvec(k);
    }

    // dR/da_i, Gallego & Yezzi form with a first-order fallback near zero.
    const T theta2 = axis.squaredNorm();
    Mat3 ax;
    ax << T(0), -axis.z(), axis.y(), axis.z(), T(0), -axis.x(), -axis.y(), axis.x(), T(0);
    for (int i = 0; i < 3; ++i) {
        Vec3 e = Vec3::Zero();
        e(i) = T(1);
        Mat3 dr;
        if (theta2 < T(1e-8)) {
            Mat3 ex;
            ex << T(0), -e.z(), e.y(), e.z(), T(0), -e.x(), -e.y(), e.x(), T(0);
            dr = ex + T(0.5) * (ex * ax + ax * ex);
        } else {
            Vec3 v = axis.cross((Mat3::Identity() - r) * e);
            Mat3 vx;
            vx << T(0), -v.z(), v.y(), v.z(), T(0), -v.x(), -v.y(), v.x(), T(0);
            dr = ((axis(i) * ax + vx) / theta2) * r;
        }
        grad[static_cast<size_t>(3 + i)] = (g_r.array() * dr.array()).sum();
    }
    return grad;
}

// ---------------------------------------------------------------------------
// projection
// ---------------------------------------------------------------------------

template <class T>
struct Projected {
    bool valid = false;
    T mean_x = 0, mean_y = 0;  // pixels
    T cov_a = 0, cov_b = 0, cov_c = 0; // 2x2 screen covariance (with dilation)
    T depth = 0;               // camera-space z, meters
};

// EWA point projection of one Gaussian; `sigma` is the 3x3 world covariance.
template <class T>
Projected<T> project_gaussian(const Camera& cam, const Eigen::Matrix<T, 3, 1>& pos,
                              const Eigen::Matrix<T, 3, 3>& sigma) {
    Projected<T> out;
    const Eigen::Matrix<T, 3, 3> w = cam.rotation().template cast<T>();
    const Eigen::Matrix<T, 3, 1> t = w * pos + cam.translation().template cast<T>();
    if (t.z() <= static_cast<T>(kNearPlane)) return out; // culled
    const T fx = static_cast<T>(cam.fx), fy = static_cast<T>(cam.fy);
    const T iz = T(1) / t.z();
    out.mean_x = fx * t.x() * iz + static_cast<T>(cam.cx);
    out.mean_y = fy * t.y() * iz + static_cast<T>(cam.cy);
    out.depth = t.z();
    Eigen::Matrix<T, 2, 3> j;
    j << fx * iz, T(0), -fx * t.x() * iz * iz, T(0), fy * iz, -fy * t.y() * iz * iz;
    const Eigen::Matrix<T, 2, 3> u = j * w;
    const Eigen::Matrix<T, 2, 2> m = u * sigma * u.transpose();
    out.cov_a = m(0, 0) + static_cast<T>(kCovDilation);
    out.cov_b = m(0, 1);
    out.cov_c = m(1, 1) + static_cast<T>(kCovDilation);
    out.valid = true;
    return out;
}

// ---------------------------------------------------------------------------
// rasterize
// ---------------------------------------------------------------------------

struct RasterizeOptions {
    bool exact = false; // disable bbox/alpha-floor/early-stop heuristics
};

// Sliced views over the packed rasterizer output [H, W, A+1].
template <class T>
struct RenderOutput {
    Tensor<T> packed;  // [H, W, A+1]; the last channel is accumulated alpha
    int64_t height = 0, width = 0, channels = 0; // channels = A

    Tensor<T> image() const { return slice_lastdim(packed, 0, 3); }
    Tensor<T> feature_map(int64_t f) const { return slice_lastdim(packed, 3, f); }
    Tensor<T> mask_maps(int64_t f, int64_t m) const { return slice_lastdim(packed, 3 + f, m); }
    Tensor<T> alpha() const { return slice_lastdim(packed, channels, 1); }
};

namespace detail {

template <class T>
struct RasterizeOp : CustomOp<T> {
    Camera cam;
    std::vector<T> background; // A values
    RasterizeOptions opts;

    // retained forward state
    bool has_state = false;
    std::vector<Projected<T>> proj;          // per gaussian
    std::vector<int32_t> order;              // depth-sorted valid indices
    std::vector<std::vector<int32_t>> cand;  // per-pixel candidates (fast mode)
    std::vector<T> final_t;                  // per-pixel transmittance
    std::vector<T> out_cache;                // forward output copy

    RasterizeOp(Camera c, std::vector<T> bg, RasterizeOptions o)
        : cam(std::move(c)), background(std::move(bg)), opts(o) {}

    std::string name() const override { return "rasterize"; }

    std::pair<Shape, std::vector<T>> forward(const std::vector<const Node<T>*>& in) override {
        rasterize_forward_calls().fetch_add(1, std::memory_order_relaxed);
        const Node<T>* pos = in[0];
        const Node<T>* cov6 = in[1];
        const Node<T>* opacity = in[2];
        const Node<T>* attrs = in[3];
        const int64_t n = pos->shape.empty() ? 0 : pos->shape[0];
        op_check(pos->shape == Shape{n, 3}, "rasterize", "position must be [N,3]");
        op_check(cov6->shape == Shape{n, 6}, "rasterize", "cov_params must be [N,6]");
        op_check(opacity->shape == Shape{n, 1}, "rasterize", "opacity must be [N,1]");
        op_check(attrs->shape.size() == 2 && attrs->shape[0] == n, "rasterize",
                 "attributes rows must align with Gaussians");
        const int64_t a = attrs->shape[1];
        op_check(static_cast<int64_t>(background.size()) == a, "rasterize",
                 "background size must equal attribute channel count");
        const int64_t h = cam.height, w = cam.width;

        proj.assign(static_cast<size_t>(n), Projected<T>{});
        order.clear();
        for (int64_t g = 0; g < n; ++g) {
            Eigen::Matrix<T, 3, 1> p(pos->val[static_cast<size_t>(3 * g)],
                                     pos->val[static_cast<size_t>(3 * g + 1)],
                                     pos->val[static_cast<size_t>(3 * g + 2)]);
            auto sigma = build_covariance(&cov6->val[static_cast<size_t>(6 * g)]);
            proj[static_cast<size_t>(g)] = project_gaussian(cam, p, sigma);
            if (proj[static_cast<size_t>(g)].valid) order.push_back(static_cast<int32_t>(g));
        }
        std::sort(order.begin(), order.end(), [&](int32_t x, int32_t y) {
            const T dx = proj[static_cast<size_t>(x)].depth, dy = proj[static_cast<size_t>(y)].depth;
            return dx != dy ? dx < dy : x < y;
        });

        cand.clear();
        if (!opts.exact) {
            cand.assign(static_cast<size_t>(h * w), {});
            for (int32_t g : order) {
                const auto& pr = proj[static_cast<size_t>(g)];
                const T det = pr.cov_a * pr.cov_c - pr.cov_b * pr.cov_b;
                const T mid = T(0.5) * (pr.cov_a + pr.cov_c);
                const T lmax = mid + std::sqrt(std::max(T(0.01), mid * mid - det));
                const T r = T(3) * std::sqrt(lmax);
                const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(pr.mean_x - r)));
                const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::ceil(pr.mean_x + r)));
                const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(pr.mean_y - r)));
                const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::ceil(pr.mean_y + r)));
                for (int64_t y = y0; y <= y1; ++y)
                    for (int64_t x = x0; x <= x1; ++x)
                        cand[static_cast<size_t>(y * w + x)].push_back(g);
            }
        }

        std::vector<T> out(static_cast<size_t>(h * w * (a + 1)), T(0));
        final_t.assign(static_cast<size_t>(h * w), T(1));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int64_t pix = y * w + x;
                T* o = &out[static_cast<size_t>(pix * (a + 1))];
                T trans = T(1);
                auto composite = [&](int32_t g) -> bool {
                    const auto& pr = proj[static_cast<size_t>(g)];
                    const T dx = static_cast<T>(x) - pr.mean_x;
                    const T dy = static_cast<T>(y) - pr.mean_y;
                    const T det = pr.cov_a * pr.cov_c - pr.cov_b * pr.cov_b;
                    const T ca = pr.cov_c / det, cb = -pr.cov_b / det, cc = pr.cov_a / det;
                    const T power = -T(0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                    if (power > T(0)) return true;
                    const T alpha_raw = opacity->val[static_cast<size_t>(g)] * std::exp(power);
                    const T alpha = std::min(static_cast<T>(kAlphaClamp), alpha_raw);
                    if (!opts.exact && alpha < static_cast<T>(kAlphaFloor)) return true;
                    for (int64_t c = 0; c < a; ++c)
                        o[c] += attrs->val[static_cast<size_t>(g * a + c)] * alpha * trans;
                    trans *= (T(1) - alpha);
                    if (!opts.exact && trans < static_cast<T>(kEarlyStopT)) return false;
                    return true;
                };
                if (opts.exact) {
                    for (int32_t g : order)
                        if (!composite(g)) break;
                } else {
                    for (int32_t g : cand[static_cast<size_t>(pix)])
                        if (!composite(g)) break;
                }
                for (int64_t c = 0; c < a; ++c) o[c] += trans * background[static_cast<size_t>(c)];
                o[a] = T(1) - trans;
                final_t[static_cast<size_t>(pix)] = trans;
            }
        }
        out_cache = out;
        has_state = true;
        return {Shape{h, w, a + 1}, std::move(out)};
    }

    std::vector<std::vector<T>> backward(const std::vector<T>& grad_out,
                                         const std::vector<const Node<T>*>& in) override {
        op_check(has_state, "rasterize", "backward called without a retained forward pass");
        const Node<T>* pos = in[0];
        const Node<T>* cov6 = in[1];
        const Node<T>* opacity = in[2];
        const Node<T>* attrs = in[3];
        const int64_t n = pos->shape[0];
        const int64_t a = attrs->shape[1];
        const int64_t h = cam.height, w = cam.width;
        op_check(grad_out.size() == static_cast<size_t>(h * w * (a + 1)), "rasterize",
                 "gradient does not match retained forward state");

        std::vector<T> g_pos(static_cast<size_t>(n * 3), T(0));
        std::vector<T> g_cov(static_cast<size_t>(n * 6), T(0));
        std::vector<T> g_opa(static_cast<size_t>(n), T(0));
        std::vector<T> g_att(static_cast<size_t>(n * a), T(0));
        std::vector<T> g_mean(static_cast<size_t>(n * 2), T(0));
        std::vector<T> g_conic(static_cast<size_t>(n * 3), T(0)); // dA,dB,dC of the conic

        std::vector<T> prefix(static_cast<size_t>(a));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                const int64_t pix = y * w + x;
                const T* g_out = &grad_out[static_cast<size_t>(pix * (a + 1))];
                bool any = false;
                for (int64_t c = 0; c <= a; ++c) any = any || g_out[c] != T(0);
                if (!any) continue;
                const T t_fin = final_t[static_cast<size_t>(pix)];
                const T* o = &out_cache[static_cast<size_t>(pix * (a + 1))];
                std::fill(prefix.begin(), prefix.end(), T(0));
                T trans = T(1);
                auto visit = [&](int32_t g) -> bool {
                    const auto& pr = proj[static_cast<size_t>(g)];
                    const T dx = static_cast<T>(x) - pr.mean_x;
                    const T dy = static_cast<T>(y) - pr.mean_y;
                    const T det = pr.cov_a * pr.cov_c - pr.cov_b * pr.cov_b;
                    const T ca = pr.cov_c / det, cb = -pr.cov_b / det, cc = pr.cov_a / det;
                    const T power = -T(0.5) * (ca * dx * dx + cc * dy * dy) - cb * dx * dy;
                    if (power > T(0)) return true;
                    const T gexp = std::exp(power);
                    const T alpha_raw = opacity->val[static_cast<size_t>(g)] * gexp;
                    const T alpha = std::min(static_cast<T>(kAlphaClamp), alpha_raw);
                    if (!opts.exact && alpha < static_cast<T>(kAlphaFloor)) return true;

                    const T om = T(1) - alpha;
                    T d_alpha = T(0);
                    for (int64_t c = 0; c < a; ++c) {
                        const T attr = attrs->val[static_cast<size_t>(g * a + c)];
                        const T contrib = attr * alpha * trans;
                        prefix[static_cast<size_t>(c)] += contrib;
                        if (g_out[c] == T(0)) continue;
                        // foreground behind this splat = total fg - inclusive prefix
                        const T fg_total = o[c] - t_fin * background[static_cast<size_t>(c)];
                        const T behind = fg_total - prefix[static_cast<size_t>(c)];
                        d_alpha += g_out[c] *
                                   (attr * trans -
                                    (behind + t_fin * background[static_cast<size_t>(c)]) / om);
                        g_att[static_cast<size_t>(g * a + c)] += g_out[c] * alpha * trans;
                    }
                    if (g_out[a] != T(0)) d_alpha += g_out[a] * t_fin / om;

                    if (alpha_raw < static_cast<T>(kAlphaClamp)) {
                        g_opa[static_cast<size_t>(g)] += d_alpha * gexp;
                        const T d_power = d_alpha * alpha_raw;
                        const T ddx = d_power * (-(ca * dx + cb * dy));
                        const T ddy = d_power * (-(cb * dx + cc * dy));
                        g_mean[static_cast<size_t>(2 * g)] -= ddx;
                        g_mean[static_cast<size_t>(2 * g + 1)] -= ddy;
                        g_conic[static_cast<size_t>(3 * g)] += d_power * (-T(0.5) * dx * dx);
                        g_conic[static_cast<size_t>(3 * g + 1)] += d_power * (-dx * dy);
                        g_conic[static_cast<size_t>(3 * g + 2)] += d_power * (-T(0.5) * dy * dy);
                    }
                    trans *= om;
                    if (!opts.exact && trans < static_cast<T>(kEarlyStopT)) return false;
                    return true;
                };
                if (opts.exact) {
                    for (int32_t g : order)
                        if (!visit(g)) break;
                } else {
                    for (int32_t g : cand[static_cast<size_t>(pix)])
                        if (!visit(g)) break;
                }
            }
        }

        // per-Gaussian geometry chain
        const Eigen::Matrix<T, 3, 3> wrot = cam.rotation().template cast<T>();
        const Eigen::Matrix<T, 3, 1> wtrans = cam.translation().template cast<T>();
        const T fx = static_cast<T>(cam.fx), fy = static_cast<T>(cam.fy);
        for (int64_t g = 0; g < n; ++g) {
            const auto& pr = proj[static_cast<size_t>(g)];
            if (!pr.valid) continue;
            const T dmx = g_mean[static_cast<size_t>(2 * g)];
            const T dmy = g_mean[static_cast<size_t>(2 * g + 1)];
            const T d_ca = g_conic[static_cast<size_t>(3 * g)];
            const T d_cb = g_conic[static_cast<size_t>(3 * g + 1)];
            const T d_cc = g_conic[static_cast<size_t>(3 * g + 2)];
            if (dmx == T(0) && dmy == T(0) && d_ca == T(0) && d_cb == T(0) && d_cc == T(0))
                continue;

            // conic -> packed screen covariance (a2, b2, c2)
            const T a2 = pr.cov_a, b2 = pr.cov_b, c2 = pr.cov_c;
            const T det = a2 * c2 - b2 * b2;
            const T idet2 = T(1) / (det * det);
            const T da2 = idet2 * (d_ca * (-c2 * c2) + d_cb * (b2 * c2) + d_cc * (-b2 * b2));
            const T db2 = idet2 * (d_ca * (T(2) * b2 * c2) - d_cb * (det + T(2) * b2 * b2) +
                                   d_cc * (T(2) * a2 * b2));
            const T dc2 = idet2 * (d_ca * (-b2 * b2) + d_cb * (a2 * b2) + d_cc * (-a2 * a2));

            // recompute the forward projection intermediates
            Eigen::Matrix<T, 3, 1> p(pos->val[static_cast<size_t>(3 * g)],
                                     pos->val[static_cast<size_t>(3 * g + 1)],
                                     pos->val[static_cast<size_t>(3 * g + 2)]);
            const Eigen::Matrix<T, 3, 1> t = wrot * p + wtrans;
            const T iz = T(1) / t.z();
            Eigen::Matrix<T, 2, 3> j;
            j << fx * iz, T(0), -fx * t.x() * iz * iz, T(0), fy * iz, -fy * t.y() * iz * iz;
            const Eigen::Matrix<T, 2, 3> u = j * wrot;
            const auto sigma = build_covariance(&cov6->val[static_cast<size_t>(6 * g)]);
            const Eigen::Matrix<T, 3, 1> u0 = u.row(0).transpose();
            const Eigen::Matrix<T, 3, 1> u1 = u.row(1).transpose();

            // screen covariance entries: a2 = u0' S u0, b2 = u0' S u1, c2 = u1' S u1
            Eigen::Matrix<T, 3, 3> g_sigma = da2 * (u0 * u0.transpose()) +
                                             db2 * (u0 * u1.transpose()) +
                                             dc2 * (u1 * u1.transpose());
            const Eigen::Matrix<T, 3, 1> su0 = sigma * u0;
            const Eigen::Matrix<T, 3, 1> su1 = sigma * u1;
            Eigen::Matrix<T, 2, 3> g_u;
            g_u.row(0) = (T(2) * da2 * su0 + db2 * su1).transpose();
            g_u.row(1) = (db2 * su0 + T(2) * dc2 * su1).transpose();
            const Eigen::Matrix<T, 2, 3> g_j = g_u * wrot.transpose();

            // J and mean2d depend on the camera-space point t
            Eigen::Matrix<T, 3, 1> g_t = Eigen::Matrix<T, 3, 1>::Zero();
            g_t.x() += g_j(0, 2) * (-fx * iz * iz);
            g_t.y() += g_j(1, 2) * (-fy * iz * iz);
            g_t.z() += g_j(0, 0) * (-fx * iz * iz) + g_j(1, 1) * (-fy * iz * iz) +
                       g_j(0, 2) * (T(2) * fx * t.x() * iz * iz * iz) +
                       g_j(1, 2) * (T(2) * fy * t.y() * iz * iz * iz);
            g_t.x() += dmx * fx * iz;
            g_t.z() += dmx * (-fx * t.x() * iz * iz);
            g_t.y() += dmy * fy * iz;
            g_t.z() += dmy * (-fy * t.y() * iz * iz);

            const Eigen::Matrix<T, 3, 1> g_p = wrot.transpose() * g_t;
            g_pos[static_cast<size_t>(3 * g)] += g_p.x();
            g_pos[static_cast<size_t>(3 * g + 1)] += g_p.y();
            g_pos[static_cast<size_t>(3 * g + 2)] += g_p.z();

            const auto g6 = build_covariance_backward(&cov6->val[static_cast<size_t>(6 * g)], g_sigma);
            for (int k = 0; k < 6; ++k) g_cov[static_cast<size_t>(6 * g + k)] += g6[static_cast<size_t>(k)];
        }

        return {std::move(g_pos), std::move(g_cov),
                std::vector<T>(g_opa.begin(), g_opa.end()), std::move(g_att)};
    }
};

} // namespace detail

// Rasterize attribute channels into a [H, W, A+1] tensor (last channel is
// accumulated alpha). Differentiable w.r.t. position, cov_params, opacity
// and attributes. Zero Gaussians yield background and zero alpha.
template <class T>
RenderOutput<T> rasterize(const Tensor<T>& position, const Tensor<T>& cov_params,
                          const Tensor<T>& opacity, const Tensor<T>& attributes, const Camera& cam,
                          const std::vector<T>& background, RasterizeOptions opts = {}) {
    auto op = std::make_shared<detail::RasterizeOp<T>>(cam, background, opts);
    RenderOutput<T> out;
    out.packed = apply_custom<T>(op, {position, cov_params, opacity, attributes});
    out.height = cam.height;
    out.width = cam.width;
    out.channels = static_cast<int64_t>(background.size());
    return out;
}

} // namespace sg::render
