#pragma once

#include <json.hpp>

#include <splatground/io.hpp>

namespace sg::model {

inline void ModelConfig::validate() const {
    op_check(hidden % heads == 0, "ModelConfig", "hidden size must be divisible by heads");
    op_check(proposals >= 1 && decoder_layers >= 1, "ModelConfig", "need proposals and layers");
    op_check(grid >= 8 && grid <= 64, "ModelConfig", "grid must be in [8, 64]");
    op_check(unet_levels >= 1 && (grid >> unet_levels) >= 1, "ModelConfig",
             "too many UNet levels for the grid");
    op_check(dropout >= 0 && dropout < 1, "ModelConfig", "dropout must be in [0,1)");
}

inline std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["proposals"] = proposals;
    j["decoder_layers"] = decoder_layers;
    j["hidden"] = hidden;
    j["heads"] = heads;
    j["ffn"] = ffn;
    j["dropout"] = dropout;
    j["encoder_dim"] = encoder_dim;
    j["feature_dim"] = feature_dim;
    j["query_dim"] = query_dim;
    j["grid"] = grid;
    j["unet_levels"] = unet_levels;
    j["unet_base_channels"] = unet_base_channels;
    j["unet_max_channels"] = unet_max_channels;
    j["decode_hidden"] = decode_hidden;
    j["max_offset"] = max_offset;
    return j.dump();
}

inline ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.proposals = j.at("proposals").get<int64_t>();
    c.decoder_layers = j.at("decoder_layers").get<int>();
    c.hidden = j.at("hidden").get<int64_t>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int64_t>();
    c.dropout = j.at("dropout").get<double>();
    c.encoder_dim = j.at("encoder_dim").get<int64_t>();
    c.feature_dim = j.at("feature_dim").get<int64_t>();
    c.query_dim = j.at("query_dim").get<int64_t>();
    c.grid = j.at("grid").get<int>();
    c.unet_levels = j.at("unet_levels").get<int>();
    c.unet_base_channels = j.at("unet_base_channels").get<int64_t>();
    c.unet_max_channels = j.at("unet_max_channels").get<int64_t>();
    c.decode_hidden = j.at("decode_hidden").get<int64_t>();
    c.max_offset = j.at("max_offset").get<double>();
    c.validate();
    return c;
}

inline SceneFrame SceneFrame::from_cloud(const PointCloud& cloud) {
    op_check(!cloud.points.empty(), "SceneFrame", "empty point cloud");
    SceneFrame f;
    for (int a = 0; a < 3; ++a) {
        f.lo[static_cast<size_t>(a)] = 1e30;
        f.hi[static_cast<size_t>(a)] = -1e30;
    }
    for (const auto& p : cloud.points)
        for (int a = 0; a < 3; ++a) {
            f.lo[static_cast<size_t>(a)] = std::min(f.lo[static_cast<size_t>(a)],
                                                    static_cast<double>(p[static_cast<size_t>(a)]));
            f.hi[static_cast<size_t>(a)] = std::max(f.hi[static_cast<size_t>(a)],
                                                    static_cast<double>(p[static_cast<size_t>(a)]));
        }
    for (int a = 0; a < 3; ++a) {
        const double pad = 0.05 * std::max(1e-3, f.hi[static_cast<size_t>(a)] - f.lo[static_cast<size_t>(a)]);
        f.lo[static_cast<size_t>(a)] -= pad;
        f.hi[static_cast<size_t>(a)] += pad;
    }
    return f;
}

template <class T>
Tensor<T> positional_encoding(const std::vector<std::array<double, 3>>& coords, int64_t dim) {
    const int64_t per_axis = dim / 6; // sin+cos pairs per axis; remainder zero
    const int64_t n = static_cast<int64_t>(coords.size());
    std::vector<T> v(static_cast<size_t>(n * dim), T(0));
    for (int64_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            const double u = coords[static_cast<size_t>(i)][static_cast<size_t>(a)];
            for (int64_t k = 0; k < per_axis; ++k) {
                const double angle = std::ldexp(M_PI * u, static_cast<int>(k)); // 2^k * pi * u
                const int64_t base = (a * per_axis + k) * 2;
                v[static_cast<size_t>(i * dim + base)] = static_cast<T>(std::sin(angle));
                v[static_cast<size_t>(i * dim + base + 1)] = static_cast<T>(std::cos(angle));
            }
        }
    return Tensor<T>::from({n, dim}, std::move(v));
}

template <class T>
Model<T>::Model(ModelConfig config, uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(Rng::mix(seed, 0x30D31ull));
    dropout_rng_ = Rng(Rng::mix(seed, 0xD201ull));

    auto weight = [&](const std::string& name, Shape shape, int64_t fan_in) {
        auto t = Tensor<T>::randn(shape, rng, static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in))));
        t.set_requires_grad(true).set_name(name);
        params_.emplace_back(name, t);
        index_[name] = params_.size() - 1;
        return t;
    };
    auto fill = [&](const std::string& name, Shape shape, T value) {
        auto t = Tensor<T>::full(shape, value);
        t.set_requires_grad(true).set_name(name);
        params_.emplace_back(name, t);
        index_[name] = params_.size() - 1;
        return t;
    };
    auto linear_pair = [&](const std::string& name, int64_t in, int64_t out) {
        weight(name + ".w", {in, out}, in);
        fill(name + ".b", {out}, T(0));
    };
    auto conv_pair = [&](const std::string& name, int64_t cin, int64_t cout) {
        weight(name + ".w", {cout, cin, 3, 3, 3}, cin * 27);
        fill(name + ".b", {cout}, T(0));
    };
    auto ln_pair = [&](const std::string& name) {
        fill(name + ".gamma", {config_.hidden}, T(1));
        fill(name + ".beta", {config_.hidden}, T(0));
    };

    // voxel UNet
    std::vector<int64_t> ch(static_cast<size_t>(config_.unet_levels) + 1);
    for (int l = 0; l <= config_.unet_levels; ++l)
        ch[static_cast<size_t>(l)] =
            std::min<int64_t>(config_.unet_base_channels << l, config_.unet_max_channels);
    conv_pair("unet.enc0.conv0", 4, ch[0]);
    conv_pair("unet.enc0.conv1", ch[0], ch[0]);
    for (int l = 1; l <= config_.unet_levels; ++l) {
        conv_pair("unet.down" + std::to_string(l), ch[static_cast<size_t>(l - 1)], ch[static_cast<size_t>(l)]);
        conv_pair("unet.enc" + std::to_string(l) + ".conv1", ch[static_cast<size_t>(l)],
                  ch[static_cast<size_t>(l)]);
    }
    for (int l = config_.unet_levels - 1; l >= 0; --l)
        conv_pair("unet.dec" + std::to_string(l),
                  ch[static_cast<size_t>(l + 1)] + ch[static_cast<size_t>(l)], ch[static_cast<size_t>(l)]);
    linear_pair("unet.head0", ch[0], config_.encoder_dim);
    linear_pair("unet.head1", config_.encoder_dim, config_.encoder_dim);

    // pointwise Gaussian decoder
    const int64_t out_ch = 13 + config_.feature_dim;
    linear_pair("decode.mlp0", config_.encoder_dim, config_.decode_hidden);
    linear_pair("decode.mlp1", config_.decode_hidden, config_.decode_hidden);
    linear_pair("decode.mlp2", config_.decode_hidden, out_ch);
    {
        // start with voxel-scale Gaussians and fairly opaque splats
        auto& bias = params_[index_["decode.mlp2.b"]].second;
        auto& v = bias.values_mut();
        for (int i = 3; i < 6; ++i) v[static_cast<size_t>(i)] = static_cast<T>(std::log(0.04));
        v[12] = T(1.0);
    }

    // grounding decoder
    linear_pair("ground.g_proj", config_.feature_dim, config_.hidden);
    linear_pair("ground.q_proj", config_.query_dim, config_.hidden);
    {
        auto t = Tensor<T>::randn({config_.proposals, config_.hidden}, rng, T(0.02));
        t.set_requires_grad(true).set_name("ground.proposals");
        params_.emplace_back("ground.proposals", t);
        index_["ground.proposals"] = params_.size() - 1;
    }
    {
        auto t = Tensor<T>::randn({1, config_.hidden}, rng, T(0.02));
        t.set_requires_grad(true).set_name("ground.no_match");
        params_.emplace_back("ground.no_match", t);
        index_["ground.no_match"] = params_.size() - 1;
    }
    for (int l = 0; l < config_.decoder_layers; ++l) {
        const std::string p = "ground.layer" + std::to_string(l) + ".";
        for (const char* blk : {"xg", "xq", "self"}) {
            for (const char* mat : {"wq", "wk", "wv", "wo"})
                linear_pair(p + blk + "." + mat, config_.hidden, config_.hidden);
        }
        linear_pair(p + "ffn0", config_.hidden, config_.ffn);
        linear_pair(p + "ffn1", config_.ffn, config_.hidden);
        for (int i = 1; i <= 4; ++i) ln_pair(p + "ln" + std::to_string(i));
    }
    linear_pair("ground.mask_head0", config_.hidden, config_.hidden);
    linear_pair("ground.mask_head1", config_.hidden, config_.hidden);
    linear_pair("ground.gauss_head", config_.hidden, config_.hidden);
    linear_pair("ground.text_head", config_.hidden, config_.hidden);
}

template <class T>
Tensor<T> Model<T>::param(const std::string& name) const {
    auto it = index_.find(name);
    op_check(it != index_.end(), "Model::param", "unknown parameter '" + name + "'");
    return params_[it->second].second;
}

template <class T>
Tensor<T> Model<T>::linear(const std::string& name, const Tensor<T>& x) const {
    return add(matmul(x, param(name + ".w")), param(name + ".b"));
}

template <class T>
Tensor<T> Model<T>::maybe_dropout(const Tensor<T>& x) {
    if (!training_ || config_.dropout <= 0) return x;
    return dropout(x, static_cast<T>(config_.dropout), dropout_rng_);
}

template <class T>
int64_t Model<T>::count_parameters() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
}

template <class T>
Tensor<T> Model<T>::encode_points(const PointCloud& cloud, const SceneFrame& frame) {
    op_check(!cloud.points.empty(), "encode_points", "empty point cloud");
    const int64_t n = static_cast<int64_t>(cloud.size());
    std::vector<std::array<double, 3>> coords(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) coords[i] = frame.normalize(cloud.points[i]);

    std::vector<T> feats(static_cast<size_t>(n * 4));
    for (int64_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a)
            feats[static_cast<size_t>(i * 4 + a)] =
                static_cast<T>(cloud.colors[static_cast<size_t>(i)][static_cast<size_t>(a)]);
        feats[static_cast<size_t>(i * 4 + 3)] = T(1); // occupancy channel
    }
    const int64_t g = config_.grid;
    auto x = voxel_splat(coords, Tensor<T>::from({n, 4}, std::move(feats)), g, g, g);

    std::vector<Tensor<T>> skips;
    x = gelu(conv3d(x, param("unet.enc0.conv0.w"), param("unet.enc0.conv0.b"), 1));
    x = gelu(conv3d(x, param("unet.enc0.conv1.w"), param("unet.enc0.conv1.b"), 1));
    skips.push_back(x);
    for (int l = 1; l <= config_.unet_levels; ++l) {
        const std::string ls = std::to_string(l);
        x = gelu(conv3d(x, param("unet.down" + ls + ".w"), param("unet.down" + ls + ".b"), 2));
        x = gelu(conv3d(x, param("unet.enc" + ls + ".conv1.w"), param("unet.enc" + ls + ".conv1.b"), 1));
        skips.push_back(x);
    }
    for (int l = config_.unet_levels - 1; l >= 0; --l) {
        const auto& skip = skips[static_cast<size_t>(l)];
        x = upsample_nearest3d(x, skip.dim(1), skip.dim(2), skip.dim(3));
        x = concat_dim0<T>({x, skip});
        const std::string ls = std::to_string(l);
        x = gelu(conv3d(x, param("unet.dec" + ls + ".w"), param("unet.dec" + ls + ".b"), 1));
    }
    auto pts = voxel_sample(x, coords);
    auto h = gelu(linear("unet.head0", pts));
    return linear("unet.head1", h);
}

template <class T>
GaussianSet<T> Model<T>::decode_gaussians(const Tensor<T>& point_features, const PointCloud& cloud) {
    const int64_t n = point_features.dim(0);
    op_check(n == static_cast<int64_t>(cloud.size()), "decode_gaussians",
             "feature rows must align with points");
    auto h = gelu(linear("decode.mlp0", point_features));
    h = gelu(linear("decode.mlp1", h));
    auto raw = linear("decode.mlp2", h); // [N, 13+F]

    std::vector<T> pts(static_cast<size_t>(n * 3));
    for (int64_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a)
            pts[static_cast<size_t>(i * 3 + a)] =
                static_cast<T>(cloud.points[static_cast<size_t>(i)][static_cast<size_t>(a)]);

    GaussianSet<T> out;
    auto offset = mul_scalar(tanh_op(slice_lastdim(raw, 0, 3)), static_cast<T>(config_.max_offset));
    out.position = add(Tensor<T>::from({n, 3}, std::move(pts)), offset);
    out.cov_params = slice_lastdim(raw, 3, 6);
    out.color = sigmoid(slice_lastdim(raw, 9, 3));
    out.opacity = sigmoid(slice_lastdim(raw, 12, 1));
    out.feature = l2_normalize_lastdim(slice_lastdim(raw, 13, config_.feature_dim));
    return out;
}

template <class T>
Tensor<T> Model<T>::attention(const std::string& prefix, const Tensor<T>& queries_in,
                              const Tensor<T>& keys_in, const Tensor<T>& values_in) const {
    const int64_t h = config_.hidden;
    const int64_t d = h / config_.heads;
    auto q = linear(prefix + ".wq", queries_in);
    auto k = linear(prefix + ".wk", keys_in);
    auto v = linear(prefix + ".wv", values_in);
    std::vector<Tensor<T>> heads;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    for (int i = 0; i < config_.heads; ++i) {
        auto qh = slice_lastdim(q, i * d, d);
        auto kh = slice_lastdim(k, i * d, d);
        auto vh = slice_lastdim(v, i * d, d);
        auto attn = softmax_lastdim(mul_scalar(matmul(qh, transpose2d(kh)), scale));
        heads.push_back(matmul(attn, vh));
    }
    return linear(prefix + ".wo", concat_lastdim(heads));
}

template <class T>
GroundingOutput<T> Model<T>::ground(const Tensor<T>& gaussian_features, const PointCloud& cloud,
                                    const SceneFrame& frame, const Tensor<T>& queries) {
    op_check(queries.rank() == 2 && queries.dim(0) >= 1, "ground", "need at least one query token");
    op_check(gaussian_features.dim(0) >= 1, "ground", "need at least one Gaussian token");
    op_check(queries.dim(1) == config_.query_dim, "ground", "query embedding dim mismatch");

    auto g_tok = linear("ground.g_proj", gaussian_features); // [N,h]
    std::vector<std::array<double, 3>> coords(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) coords[i] = frame.normalize(cloud.points[i]);
    auto pe = positional_encoding<T>(coords, config_.hidden);
    auto g_with_pe = add(g_tok, pe);
    auto q_tok = linear("ground.q_proj", queries); // [Q,h]

    auto x = param("ground.proposals"); // [m,h]
    for (int l = 0; l < config_.decoder_layers; ++l) {
        const std::string p = "ground.layer" + std::to_string(l) + ".";
        auto a = attention(p + "xg", x, g_with_pe, g_tok);
        x = layer_norm_lastdim(add(x, maybe_dropout(a)), param(p + "ln1.gamma"), param(p + "ln1.beta"));
        a = attention(p + "xq", x, q_tok, q_tok);
        x = layer_norm_lastdim(add(x, maybe_dropout(a)), param(p + "ln2.gamma"), param(p + "ln2.beta"));
        a = attention(p + "self", x, x, x);
        x = layer_norm_lastdim(add(x, maybe_dropout(a)), param(p + "ln3.gamma"), param(p + "ln3.beta"));
        auto f = linear(p + "ffn1", gelu(linear(p + "ffn0", x)));
        x = layer_norm_lastdim(add(x, maybe_dropout(f)), param(p + "ln4.gamma"), param(p + "ln4.beta"));
    }

    GroundingOutput<T> out;
    auto mask_emb = linear("ground.mask_head1", gelu(linear("ground.mask_head0", x)));
    auto gauss_emb = linear("ground.gauss_head", g_tok);
    out.mask_logits = matmul(mask_emb, transpose2d(gauss_emb)); // [m,N]
    auto text_emb = linear("ground.text_head", x);
    auto slots = concat_dim0<T>({q_tok, param("ground.no_match")}); // [Q+1,h]
    out.corr_logits = matmul(text_emb, transpose2d(slots));        // [m,Q+1]
    return out;
}

template <class T>
ForwardOutput<T> Model<T>::forward(const PointCloud& cloud, const Tensor<T>& queries) {
    ForwardOutput<T> out;
    out.frame = SceneFrame::from_cloud(cloud);
    out.point_features = encode_points(cloud, out.frame);
    out.gaussians = decode_gaussians(out.point_features, cloud);
    out.grounding = ground(out.gaussians.feature, cloud, out.frame, queries);
    return out;
}

template <class T>
void Model<T>::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(config_.to_json());
    j["config_hash"] = config_.hash();
    std::vector<std::string> names;
    for (const auto& [name, t] : params_) names.push_back(name);
    j["params"] = names;
    io::write_text_file(dir / "model.json", j.dump(2));
    for (const auto& [name, t] : params_) {
        std::vector<float> v(t.values().begin(), t.values().end());
        std::string file = name;
        for (auto& c : file)
            if (c == '/') c = '_';
        io::write_blob(dir / file, io::Blob::f32(name, t.shape(), v));
    }
}

template <class T>
void Model<T>::load(const std::filesystem::path& dir) {
    auto j = nlohmann::json::parse(io::read_text_file(dir / "model.json"));
    const uint64_t stored = j.at("config_hash").get<uint64_t>();
    op_check(stored == config_.hash(), "Model::load",
             "config hash mismatch: checkpoint " + std::to_string(stored) + " vs model " +
                 std::to_string(config_.hash()));
    for (auto& [name, t] : params_) {
        auto blob = io::read_blob(dir / name);
        op_check(blob.shape == t.shape(), "Model::load", "shape mismatch for '" + name + "'");
        auto v = blob.as_f32();
        auto& dst = t.values_mut();
        for (size_t i = 0; i < v.size(); ++i) dst[i] = static_cast<T>(v[i]);
    }
}

} // namespace sg::model
