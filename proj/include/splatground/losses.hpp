#pragma once

// Loss stack: Hungarian-matched grounding loss (focal + dice + soft-token
// cross entropy), L1+SSIM photometric loss, and the contrastive feature
// loss. Each differentiable loss is built from taped tensor ops; matching
// costs are evaluated tape-free.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <splatground/hungarian.hpp>
#include <splatground/tensor.hpp>

namespace sg::losses {

struct LossWeights {
    double focal = 15.0; // "mask cross-entropy" slot, applied to the focal term
    double token = 2.0;
    double dice = 6.0;
    double rgb_l1 = 1.0;
    double rgb_ssim = 1.0;
    double rgb = 1.0;
    double feat = 0.1;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_eps = 1.0;
    double contrastive_tau = 0.1;
    int ssim_window = 11;
    double ssim_sigma = 1.5;
};

enum class Stage { Pretrain2D, Finetune3D };

struct LossFlags {
    bool ground = true;
    bool rgb = true;
    bool feat = true;
};

struct LossReport {
    double ground = 0, focal = 0, dice = 0, token = 0, rgb = 0, feat = 0, total = 0;
};

// ---------------------------------------------------------------------------
// pixel/point mask losses
// ---------------------------------------------------------------------------

// -alpha_t (1 - p_t)^gamma log(p_t), averaged over all elements. Predictions
// are probabilities and are clamped to [1e-6, 1 - 1e-6] first.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& pred_prob, const Tensor<T>& target, T gamma = T(2),
                     T alpha = T(0.25)) {
    op_check(pred_prob.shape() == target.shape(), "focal_loss", "shape mismatch");
    auto p = clamp(pred_prob, T(1e-6), T(1) - T(1e-6));
    auto p_t = add(mul(p, target), mul(add_scalar(neg(p), T(1)), add_scalar(neg(target), T(1))));
    auto a_t = add(mul_scalar(target, alpha),
                   mul_scalar(add_scalar(neg(target), T(1)), T(1) - alpha));
    auto loss = neg(mul(a_t, mul(pow_scalar(add_scalar(neg(p_t), T(1)), gamma), log_op(p_t))));
    return mean_all(loss);
}

// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps), over the whole tensor.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& pred_prob, const Tensor<T>& target, T eps = T(1)) {
    op_check(pred_prob.shape() == target.shape(), "dice_loss", "shape mismatch");
    auto inter = sum_all(mul(pred_prob, target));
    auto denom = add(sum_all(pred_prob), sum_all(target));
    return add_scalar(neg(div(add_scalar(mul_scalar(inter, T(2)), eps), add_scalar(denom, eps))),
                      T(1));
}

// per-row dice on [R, D] tensors, averaged over rows
template <class T>
Tensor<T> dice_loss_rows(const Tensor<T>& pred_prob, const Tensor<T>& target, T eps = T(1)) {
    op_check(pred_prob.shape() == target.shape() && pred_prob.rank() == 2, "dice_loss_rows",
             "expects matching [R,D] tensors");
    auto inter = sum_lastdim(mul(pred_prob, target));
    auto denom = add(sum_lastdim(pred_prob), sum_lastdim(target));
    auto dice = add_scalar(
        neg(div(add_scalar(mul_scalar(inter, T(2)), eps), add_scalar(denom, eps))), T(1));
    return mean_all(dice);
}

// -log softmax(logits)[target] for a single row of (|Q|+1) logits
template <class T>
Tensor<T> soft_token_ce(const Tensor<T>& logits_row, int64_t target) {
    const int64_t n = logits_row.numel();
    op_check(target >= 0 && target < n, "soft_token_ce", "target index out of range");
    auto lsm = log_softmax_lastdim(reshape(logits_row, {1, n}));
    std::vector<T> pick(static_cast<size_t>(n), T(0));
    pick[static_cast<size_t>(target)] = T(-1);
    return sum_all(mul(lsm, Tensor<T>::from({1, n}, pick)));
}

// mean over rows of -log softmax(logits[r])[targets[r]]
template <class T>
Tensor<T> soft_token_ce_rows(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
    op_check(logits.rank() == 2, "soft_token_ce_rows", "expects [R,C] logits");
    const int64_t r = logits.dim(0), c = logits.dim(1);
    op_check(static_cast<int64_t>(targets.size()) == r, "soft_token_ce_rows", "target count mismatch");
    auto lsm = log_softmax_lastdim(logits);
    std::vector<T> pick(static_cast<size_t>(r * c), T(0));
    for (int64_t i = 0; i < r; ++i) {
        op_check(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < c,
                 "soft_token_ce_rows", "target index out of range");
        pick[static_cast<size_t>(i * c + targets[static_cast<size_t>(i)])] = T(-1) / static_cast<T>(r);
    }
    return sum_all(mul(lsm, Tensor<T>::from({r, c}, pick)));
}

// ---------------------------------------------------------------------------
// matching
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
double focal_mean_span(const T* p, const T* g, int64_t n, double gamma, double alpha) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        double pv = std::min(1.0 - 1e-6, std::max(1e-6, static_cast<double>(p[i])));
        double gv = static_cast<double>(g[i]);
        double pt = pv * gv + (1 - pv) * (1 - gv);
        double at = alpha * gv + (1 - alpha) * (1 - gv);
        acc += -at * std::pow(1 - pt, gamma) * std::log(pt);
    }
    return acc / static_cast<double>(n);
}

template <class T>
double dice_span(const T* p, const T* g, int64_t n, double eps) {
    double inter = 0, sp = 0, sgm = 0;
    for (int64_t i = 0; i < n; ++i) {
        inter += static_cast<double>(p[i]) * static_cast<double>(g[i]);
        sp += static_cast<double>(p[i]);
        sgm += static_cast<double>(g[i]);
    }
    return 1.0 - (2 * inter + eps) / (sp + sgm + eps);
}

template <class T>
double token_ce_span(const T* logits, int64_t n, int64_t target) {
    double mx = logits[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(logits[i]));
    double lse = 0;
    for (int64_t i = 0; i < n; ++i) lse += std::exp(static_cast<double>(logits[i]) - mx);
    return -(static_cast<double>(logits[target]) - mx - std::log(lse));
}

} // namespace detail

// K x m matching cost (row-major): focal + dice between GT mask i and the
// proposal's rendered/3D mask, plus the soft-token term. Tape-free by
// construction (reads raw values only).
template <class T>
std::vector<double> match_cost(const Tensor<T>& pred_probs /*[m,D]*/,
                               const Tensor<T>& c_logits /*[m,Q+1]*/,
                               const Tensor<T>& gt_masks /*[K,D]*/,
                               const std::vector<int64_t>& token_of, const LossWeights& w = {}) {
    const int64_t m = pred_probs.dim(0), d = pred_probs.dim(1);
    const int64_t k = gt_masks.dim(0);
    op_check(k <= m, "match_cost",
             "K=" + std::to_string(k) + " ground-truth instances exceed m=" + std::to_string(m));
    op_check(gt_masks.dim(1) == d, "match_cost", "mask element count mismatch");
    op_check(static_cast<int64_t>(token_of.size()) == k, "match_cost", "token map size mismatch");
    const int64_t q1 = c_logits.dim(1);
    std::vector<double> cost(static_cast<size_t>(k * m));
    for (int64_t i = 0; i < k; ++i) {
        const T* g = &gt_masks.values()[static_cast<size_t>(i * d)];
        for (int64_t j = 0; j < m; ++j) {
            const T* p = &pred_probs.values()[static_cast<size_t>(j * d)];
            const T* c = &c_logits.values()[static_cast<size_t>(j * q1)];
            cost[static_cast<size_t>(i * m + j)] =
                w.focal * detail::focal_mean_span(p, g, d, w.focal_gamma, w.focal_alpha) +
                w.dice * detail::dice_span(p, g, d, w.dice_eps) +
                w.token * detail::token_ce_span(c, q1, token_of[static_cast<size_t>(i)]);
        }
    }
    return cost;
}

// ---------------------------------------------------------------------------
// grounding loss
// ---------------------------------------------------------------------------

template <class T>
struct GroundingLoss {
    Tensor<T> total;
    double focal = 0, dice = 0, token = 0; // weighted component values
};

// (1/K) sum_i [w_f focal + w_d dice](mask_{sigma(i)}, gt_i) + w_t ce(C_{sigma(i)}, token_i),
// plus w_t * mean over unmatched proposals of ce(C_j, no-match).
template <class T>
GroundingLoss<T> grounding_loss(const Tensor<T>& pred_probs /*[m,D]*/,
                                const Tensor<T>& c_logits /*[m,Q+1]*/,
                                const Tensor<T>& gt_masks /*[K,D]*/,
                                const std::vector<int64_t>& token_of, const MatchResult& match,
                                const LossWeights& w = {}) {
    const int64_t k = gt_masks.dim(0);
    op_check(k >= 1, "grounding_loss", "no ground-truth instances (skip the sample upstream)");
    op_check(static_cast<int64_t>(match.assignment.size()) == k, "grounding_loss",
             "matching does not cover all instances");
    std::vector<int64_t> sigma(match.assignment.begin(), match.assignment.end());

    auto matched = gather_rows(pred_probs, sigma);
    auto focal = focal_loss(matched, gt_masks, static_cast<T>(w.focal_gamma),
                            static_cast<T>(w.focal_alpha));
    auto dice = dice_loss_rows(matched, gt_masks, static_cast<T>(w.dice_eps));
    auto ce = soft_token_ce_rows(gather_rows(c_logits, sigma), token_of);

    GroundingLoss<T> out;
    auto total = add(add(mul_scalar(focal, static_cast<T>(w.focal)),
                         mul_scalar(dice, static_cast<T>(w.dice))),
                     mul_scalar(ce, static_cast<T>(w.token)));
    double token_val = w.token * static_cast<double>(ce.item());
    if (!match.unmatched.empty()) {
        const int64_t no_match = c_logits.dim(1) - 1;
        std::vector<int64_t> rows(match.unmatched.begin(), match.unmatched.end());
        std::vector<int64_t> targets(rows.size(), no_match);
        auto ce_un = soft_token_ce_rows(gather_rows(c_logits, rows), targets);
        total = add(total, mul_scalar(ce_un, static_cast<T>(w.token)));
        token_val += w.token * static_cast<double>(ce_un.item());
    }
    out.total = total;
    out.focal = w.focal * static_cast<double>(focal.item());
    out.dice = w.dice * static_cast<double>(dice.item());
    out.token = token_val;
    return out;
}

// ---------------------------------------------------------------------------
// photometric loss (L1 + SSIM)
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
struct GaussBlurValidOp : CustomOp<T> {
    int window;
    std::vector<T> kernel1d; // separable, sums to 1

    GaussBlurValidOp(int win, double sigma) : window(win) {
        kernel1d.resize(static_cast<size_t>(win));
        const double c = (win - 1) / 2.0;
        double sum = 0;
        for (int x = 0; x < win; ++x) {
            double v = std::exp(-(x - c) * (x - c) / (2 * sigma * sigma));
            kernel1d[static_cast<size_t>(x)] = static_cast<T>(v);
            sum += v;
        }
        for (auto& v : kernel1d) v = static_cast<T>(static_cast<double>(v) / sum);
    }

    std::string name() const override { return "gauss_blur2d_valid"; }

    // horizontal valid pass: [H, W, C] -> [H, W-win+1, C]
    std::vector<T> hpass(const std::vector<T>& in, int64_t h, int64_t w, int64_t c) const {
        const int64_t wo = w - window + 1;
        std::vector<T> out(static_cast<size_t>(h * wo * c), T(0));
        for (int64_t y = 0; y < h; ++y)
            for (int dx = 0; dx < window; ++dx) {
                const T kv = kernel1d[static_cast<size_t>(dx)];
                const T* src = &in[static_cast<size_t>((y * w + dx) * c)];
                T* dst = &out[static_cast<size_t>(y * wo * c)];
                for (int64_t i = 0; i < wo * c; ++i) dst[i] += kv * src[i];
            }
        return out;
    }
    // vertical valid pass: [H, W, C] -> [H-win+1, W, C]
    std::vector<T> vpass(const std::vector<T>& in, int64_t h, int64_t w, int64_t c) const {
        const int64_t ho = h - window + 1;
        std::vector<T> out(static_cast<size_t>(ho * w * c), T(0));
        for (int dy = 0; dy < window; ++dy) {
            const T kv = kernel1d[static_cast<size_t>(dy)];
            const T* src = &in[static_cast<size_t>(dy * w * c)];
            for (int64_t i = 0; i < ho * w * c; ++i) out[static_cast<size_t>(i)] += kv * src[i];
        }
        return out;
    }
    // transposes of the valid passes (zero-extending scatter)
    std::vector<T> hpass_t(const std::vector<T>& g, int64_t h, int64_t w, int64_t c) const {
        const int64_t wo = w - window + 1;
        std::vector<T> out(static_cast<size_t>(h * w * c), T(0));
        for (int64_t y = 0; y < h; ++y)
            for (int dx = 0; dx < window; ++dx) {
                const T kv = kernel1d[static_cast<size_t>(dx)];
                const T* src = &g[static_cast<size_t>(y * wo * c)];
                T* dst = &out[static_cast<size_t>((y * w + dx) * c)];
                for (int64_t i = 0; i < wo * c; ++i) dst[i] += kv * src[i];
            }
        return out;
    }
    std::vector<T> vpass_t(const std::vector<T>& g, int64_t h, int64_t w, int64_t c) const {
        const int64_t ho = h - window + 1;
        std::vector<T> out(static_cast<size_t>(h * w * c), T(0));
        for (int dy = 0; dy < window; ++dy) {
            const T kv = kernel1d[static_cast<size_t>(dy)];
            const T* src = &g[0];
            T* dst = &out[static_cast<size_t>(dy * w * c)];
            for (int64_t i = 0; i < ho * w * c; ++i) dst[i] += kv * src[i];
        }
        return out;
    }

    std::pair<Shape, std::vector<T>> forward(const std::vector<const Node<T>*>& in) override {
        const auto& s = in[0]->shape;
        op_check(s.size() == 3, name(), "input must be [H,W,C]");
        const int64_t h = s[0], w = s[1], c = s[2];
        op_check(h >= window && w >= window, name(), "image smaller than the window");
        auto tmp = hpass(in[0]->val, h, w, c);
        auto out = vpass(tmp, h, w - window + 1, c);
        return {Shape{h - window + 1, w - window + 1, c}, std::move(out)};
    }

    std::vector<std::vector<T>> backward(const std::vector<T>& g,
                                         const std::vector<const Node<T>*>& in) override {
        const auto& s = in[0]->shape;
        const int64_t h = s[0], w = s[1], c = s[2];
        auto tmp = vpass_t(g, h, w - window + 1, c);
        return {hpass_t(tmp, h, w, c)};
    }
};

} // namespace detail

template <class T>
Tensor<T> gauss_blur2d_valid(const Tensor<T>& img, int window = 11, double sigma = 1.5) {
    auto op = std::make_shared<detail::GaussBlurValidOp<T>>(window, sigma);
    return apply_custom<T>(op, {img});
}

// mean SSIM over the valid region, channel-averaged. 11x11 Gaussian window,
// sigma 1.5, C1=0.01^2, C2=0.03^2.
template <class T>
Tensor<T> ssim(const Tensor<T>& x, const Tensor<T>& y, int window = 11, double sigma = 1.5) {
    op_check(x.shape() == y.shape(), "ssim", "shape mismatch");
    const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);
    auto mx = gauss_blur2d_valid(x, window, sigma);
    auto my = gauss_blur2d_valid(y, window, sigma);
    auto mxx = gauss_blur2d_valid(mul(x, x), window, sigma);
    auto myy = gauss_blur2d_valid(mul(y, y), window, sigma);
    auto mxy = gauss_blur2d_valid(mul(x, y), window, sigma);
    auto vx = sub(mxx, mul(mx, mx));
    auto vy = sub(myy, mul(my, my));
    auto cxy = sub(mxy, mul(mx, my));
    auto num = mul(add_scalar(mul_scalar(mul(mx, my), T(2)), c1),
                   add_scalar(mul_scalar(cxy, T(2)), c2));
    auto den = mul(add_scalar(add(mul(mx, mx), mul(my, my)), c1), add_scalar(add(vx, vy), c2));
    return mean_all(div(num, den));
}

template <class T>
struct PhotometricLoss {
    Tensor<T> total;
    double l1 = 0, ssim_loss = 0;
};

// lambda1 * mean|I~ - I| + lambda2 * (1 - SSIM(I~, I))
template <class T>
PhotometricLoss<T> photometric_loss(const Tensor<T>& rendered, const Tensor<T>& target,
                                    const LossWeights& w = {}) {
    op_check(rendered.shape() == target.shape(), "photometric_loss", "shape mismatch");
    auto l1 = mean_all(abs_op(sub(rendered, target)));
    auto ssim_term = add_scalar(neg(ssim(rendered, target, w.ssim_window, w.ssim_sigma)), T(1));
    PhotometricLoss<T> out;
    out.total = add(mul_scalar(l1, static_cast<T>(w.rgb_l1)),
                    mul_scalar(ssim_term, static_cast<T>(w.rgb_ssim)));
    out.l1 = static_cast<double>(l1.item());
    out.ssim_loss = static_cast<double>(ssim_term.item());
    return out;
}

// ---------------------------------------------------------------------------
// contrastive feature loss
// ---------------------------------------------------------------------------

// Rendered features at labeled pixels are L2-normalized and scored against
// the unique instance embeddings present in the view; background pixels are
// excluded. A view without labeled pixels contributes zero (with a warning).
template <class T>
Tensor<T> feature_contrastive_loss(const Tensor<T>& feat_map /*[H,W,F]*/,
                                   const std::vector<uint32_t>& semantics /*H*W, 0=background*/,
                                   const Tensor<T>& index2sem /*[K,F]*/, T tau = T(0.1)) {
    op_check(feat_map.rank() == 3, "feature_contrastive_loss", "feature map must be [H,W,F]");
    const int64_t h = feat_map.dim(0), w = feat_map.dim(1), f = feat_map.dim(2);
    op_check(static_cast<int64_t>(semantics.size()) == h * w, "feature_contrastive_loss",
             "semantics size mismatch");
    op_check(index2sem.dim(1) == f, "feature_contrastive_loss", "embedding dim mismatch");

    std::vector<int64_t> labeled;
    for (int64_t i = 0; i < h * w; ++i)
        if (semantics[static_cast<size_t>(i)] != 0) labeled.push_back(i);
    if (labeled.empty()) {
        std::cerr << "warning: feature_contrastive_loss: view has no labeled pixels, contributing 0\n";
        return Tensor<T>::scalar(T(0));
    }

    // unique instance embeddings present in the view (dedupe exact duplicates)
    const int64_t k = index2sem.dim(0);
    std::vector<char> present(static_cast<size_t>(k) + 1, 0);
    for (int64_t i : labeled) present[semantics[static_cast<size_t>(i)]] = 1;
    std::vector<int64_t> inst_rows;
    std::vector<int64_t> embed_of_inst(static_cast<size_t>(k) + 1, -1);
    for (int64_t id = 1; id <= k; ++id) {
        if (!present[static_cast<size_t>(id)]) continue;
        const T* e = &index2sem.values()[static_cast<size_t>((id - 1) * f)];
        int64_t found = -1;
        for (size_t u = 0; u < inst_rows.size(); ++u) {
            const T* e2 = &index2sem.values()[static_cast<size_t>(inst_rows[u] * f)];
            bool same = true;
            for (int64_t j = 0; j < f && same; ++j) same = (e[j] == e2[j]);
            if (same) {
                found = static_cast<int64_t>(u);
                break;
            }
        }
        if (found < 0) {
            inst_rows.push_back(id - 1);
            found = static_cast<int64_t>(inst_rows.size()) - 1;
        }
        embed_of_inst[static_cast<size_t>(id)] = found;
    }

    auto flat = reshape(feat_map, {h * w, f});
    auto sel = l2_normalize_lastdim(gather_rows(flat, labeled));
    auto targets = gather_rows(index2sem, inst_rows);
    auto logits = mul_scalar(matmul(sel, transpose2d(targets)), T(1) / tau);
    std::vector<int64_t> target_idx(labeled.size());
    for (size_t i = 0; i < labeled.size(); ++i)
        target_idx[i] = embed_of_inst[semantics[static_cast<size_t>(labeled[i])]];
    return soft_token_ce_rows(logits, target_idx);
}

// ---------------------------------------------------------------------------
// stage combiner
// ---------------------------------------------------------------------------

// pretrain: ground(2D) + w.rgb * photometric + w.feat * feature, per flags;
// finetune: ground(3D) only. Throws if every enabled component is absent.
template <class T>
Tensor<T> total_loss(Stage stage, const LossFlags& flags,
                     const std::optional<GroundingLoss<T>>& ground,
                     const std::optional<PhotometricLoss<T>>& rgb,
                     const std::optional<Tensor<T>>& feat, const LossWeights& w,
                     LossReport* report = nullptr) {
    std::optional<Tensor<T>> total;
    LossReport rep;
    auto include = [&](const Tensor<T>& t) { total = total ? add(*total, t) : t; };

    if (flags.ground && ground) {
        include(ground->total);
        rep.ground = static_cast<double>(ground->total.item());
        rep.focal = ground->focal;
        rep.dice = ground->dice;
        rep.token = ground->token;
    }
    if (stage == Stage::Pretrain2D) {
        if (flags.rgb && rgb) {
            include(mul_scalar(rgb->total, static_cast<T>(w.rgb)));
            rep.rgb = w.rgb * static_cast<double>(rgb->total.item());
        }
        if (flags.feat && feat) {
            include(mul_scalar(*feat, static_cast<T>(w.feat)));
            rep.feat = w.feat * static_cast<double>(feat->item());
        }
    }
    op_check(total.has_value(), "total_loss", "all loss components are disabled or absent");
    rep.total = static_cast<double>(total->item());
    if (report) *report = rep;
    return *total;
}

} // namespace sg::losses
