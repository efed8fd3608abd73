#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgseg/ops.hpp"
#include "dgseg/optim.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/style.hpp"

namespace dgseg {

enum class InjectorKind { CrossAttention, Ffn };
enum class MimDecoderKind { Aspp, Linear };

inline InjectorKind parse_injector(const std::string& s) {
    if (s == "cross_attention") return InjectorKind::CrossAttention;
    if (s == "ffn") return InjectorKind::Ffn;
    throw ConfigError("unknown injector '" + s + "', want cross_attention or ffn");
}

inline MimDecoderKind parse_mim_decoder(const std::string& s) {
    if (s == "aspp") return MimDecoderKind::Aspp;
    if (s == "linear") return MimDecoderKind::Linear;
    throw ConfigError("unknown mim decoder '" + s + "', want aspp or linear");
}

struct ModelConfig {
    int image_h = 32;
    int image_w = 32;
    int in_channels = 3;
    int num_classes = 3;

    int patch = 4;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    std::vector<int> stage_taps;          // empty = every block
    std::vector<int> injection_indices;   // empty = stage taps

    bool use_gse = true;
    bool use_mim = true;
    InjectorKind injector = InjectorKind::CrossAttention;
    MimDecoderKind mim_decoder = MimDecoderKind::Aspp;
    bool train_visual_prompt = true;

    // Width plans; the GSE channel ramp 3->16->32->64->d is fixed.
    int decoder_c1 = 48;
    int decoder_c2 = 24;
    int aspp_branch_channels = 24;
    int aspp_fuse_channels = 48;
    int ffn_hidden = 64;

    std::vector<int> taps() const {
        if (!stage_taps.empty()) return stage_taps;
        std::vector<int> t(static_cast<std::size_t>(depth));
        for (int i = 0; i < depth; ++i) t[static_cast<std::size_t>(i)] = i;
        return t;
    }

    std::vector<int> injections() const { return injection_indices.empty() ? taps() : injection_indices; }

    void validate() const {
        if (image_h < patch || image_w < patch || image_h % patch != 0 || image_w % patch != 0)
            throw ConfigError("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                              " not divisible by patch " + std::to_string(patch));
        if (embed_dim % heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        auto check_indices = [&](const std::vector<int>& v, const char* what) {
            if (v.empty()) throw ConfigError(std::string(what) + " must be non-empty");
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (v[i] < 0 || v[i] >= depth)
                    throw ConfigError(std::string(what) + " index " + std::to_string(v[i]) +
                                      " outside [0, depth)");
                if (i > 0 && v[i] <= v[i - 1])
                    throw ConfigError(std::string(what) + " must be strictly increasing");
            }
        };
        check_indices(taps(), "stage taps");
        check_indices(injections(), "injection indices");
    }

    int grid_h() const { return image_h / patch; }
    int grid_w() const { return image_w / patch; }
    int tokens() const { return grid_h() * grid_w(); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"image_h", c.image_h},
                       {"image_w", c.image_w},
                       {"in_channels", c.in_channels},
                       {"num_classes", c.num_classes},
                       {"patch", c.patch},
                       {"embed_dim", c.embed_dim},
                       {"depth", c.depth},
                       {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"stage_taps", c.stage_taps},
                       {"injection_indices", c.injection_indices},
                       {"use_gse", c.use_gse},
                       {"use_mim", c.use_mim},
                       {"injector", c.injector == InjectorKind::CrossAttention ? "cross_attention" : "ffn"},
                       {"mim_decoder", c.mim_decoder == MimDecoderKind::Aspp ? "aspp" : "linear"},
                       {"train_visual_prompt", c.train_visual_prompt},
                       {"decoder_c1", c.decoder_c1},
                       {"decoder_c2", c.decoder_c2},
                       {"aspp_branch_channels", c.aspp_branch_channels},
                       {"aspp_fuse_channels", c.aspp_fuse_channels},
                       {"ffn_hidden", c.ffn_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.image_h = j.value("image_h", d.image_h);
    c.image_w = j.value("image_w", d.image_w);
    c.in_channels = j.value("in_channels", d.in_channels);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.patch = j.value("patch", d.patch);
    c.embed_dim = j.value("embed_dim", d.embed_dim);
    c.depth = j.value("depth", d.depth);
    c.heads = j.value("heads", d.heads);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.stage_taps = j.value("stage_taps", d.stage_taps);
    c.injection_indices = j.value("injection_indices", d.injection_indices);
    c.use_gse = j.value("use_gse", d.use_gse);
    c.use_mim = j.value("use_mim", d.use_mim);
    c.injector = parse_injector(j.value("injector", "cross_attention"));
    c.mim_decoder = parse_mim_decoder(j.value("mim_decoder", "aspp"));
    c.train_visual_prompt = j.value("train_visual_prompt", d.train_visual_prompt);
    c.decoder_c1 = j.value("decoder_c1", d.decoder_c1);
    c.decoder_c2 = j.value("decoder_c2", d.decoder_c2);
    c.aspp_branch_channels = j.value("aspp_branch_channels", d.aspp_branch_channels);
    c.aspp_fuse_channels = j.value("aspp_fuse_channels", d.aspp_fuse_channels);
    c.ffn_hidden = j.value("ffn_hidden", d.ffn_hidden);
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

namespace init {

template <typename Scalar>
Tensor<Scalar> normal(Shape shape, double stddev, Rng& rng) {
    std::vector<Scalar> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<Scalar>(rng.normal() * stddev);
    return Tensor<Scalar>(std::move(shape), std::move(v));
}

template <typename Scalar>
Tensor<Scalar> he_conv(int co, int ci, int k, Rng& rng) {
    return normal<Scalar>({co, ci, k, k}, std::sqrt(2.0 / (ci * k * k)), rng);
}

template <typename Scalar>
Tensor<Scalar> xavier(int rows, int cols, Rng& rng) {
    return normal<Scalar>({rows, cols}, std::sqrt(1.0 / rows), rng);
}

}  // namespace init

template <typename Scalar>
struct Conv2dLayer {
    Tensor<Scalar> w, b;
    int stride = 1, dilation = 1, padding = 0;

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return conv2d(x, w, b, stride, dilation, padding); }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        w = g.add(prefix + ".w", w);
        b = g.add(prefix + ".b", b);
    }
};

template <typename Scalar>
struct LinearLayer {
    Tensor<Scalar> w, b;

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return linear(x, w, b); }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        w = g.add(prefix + ".w", w);
        b = g.add(prefix + ".b", b);
    }
};

template <typename Scalar>
struct LayerNormLayer {
    Tensor<Scalar> gamma, beta;

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return layer_norm(x, gamma, beta); }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        gamma = g.add(prefix + ".gamma", gamma);
        beta = g.add(prefix + ".beta", beta);
    }
};

template <typename Scalar>
struct AttentionLayer {
    AttentionParams<Scalar> p;
    int heads = 1;

    Tensor<Scalar> forward(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v) const {
        return multi_head_attention(q, k, v, p, heads);
    }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        p.wq = g.add(prefix + ".wq", p.wq);
        p.bq = g.add(prefix + ".bq", p.bq);
        p.wk = g.add(prefix + ".wk", p.wk);
        p.bk = g.add(prefix + ".bk", p.bk);
        p.wv = g.add(prefix + ".wv", p.wv);
        p.bv = g.add(prefix + ".bv", p.bv);
        p.wo = g.add(prefix + ".wo", p.wo);
        p.bo = g.add(prefix + ".bo", p.bo);
    }
};

template <typename Scalar>
AttentionLayer<Scalar> make_attention(int d, int heads, Rng& rng, bool zero_out_proj) {
    AttentionLayer<Scalar> a;
    a.heads = heads;
    a.p.wq = init::xavier<Scalar>(d, d, rng);
    a.p.bq = Tensor<Scalar>(Shape{d});
    a.p.wk = init::xavier<Scalar>(d, d, rng);
    a.p.bk = Tensor<Scalar>(Shape{d});
    a.p.wv = init::xavier<Scalar>(d, d, rng);
    a.p.bv = Tensor<Scalar>(Shape{d});
    a.p.wo = zero_out_proj ? Tensor<Scalar>(Shape{d, d}) : init::xavier<Scalar>(d, d, rng);
    a.p.bo = Tensor<Scalar>(Shape{d});
    return a;
}

// Pre-norm transformer block: x + attn(ln1 x), then x + mlp(ln2 x).
template <typename Scalar>
struct TransformerBlock {
    LayerNormLayer<Scalar> ln1, ln2;
    AttentionLayer<Scalar> attn;
    LinearLayer<Scalar> fc1, fc2;

    Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
        Tensor<Scalar> n = ln1.forward(x);
        Tensor<Scalar> h = add(x, attn.forward(n, n, n));
        Tensor<Scalar> m = fc2.forward(gelu(fc1.forward(ln2.forward(h))));
        return add(h, m);
    }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        ln1.collect(g, prefix + ".ln1");
        attn.collect(g, prefix + ".attn");
        ln2.collect(g, prefix + ".ln2");
        fc1.collect(g, prefix + ".fc1");
        fc2.collect(g, prefix + ".fc2");
    }
};

// Cross-attention injector: geospatial queries against backbone keys/values,
// output projection zero-initialized so injection is a no-op at step 0.
template <typename Scalar>
struct Injector {
    InjectorKind kind = InjectorKind::CrossAttention;
    AttentionLayer<Scalar> attn;              // cross-attention variant
    LinearLayer<Scalar> fc1, fc2;             // ffn variant (fc2 zero-init)

    Tensor<Scalar> forward(const Tensor<Scalar>& q, const Tensor<Scalar>& feat) const {
        if (q.defined() && q.dim(1) != feat.dim(1))
            throw DimensionError("injector: query width " + std::to_string(q.dim(1)) +
                                 " vs feature width " + std::to_string(feat.dim(1)));
        if (kind == InjectorKind::CrossAttention) return attn.forward(q, feat, feat);
        return fc2.forward(relu(fc1.forward(feat)));
    }

    void collect(ParamGroup<Scalar>& g, const std::string& prefix) {
        if (kind == InjectorKind::CrossAttention) {
            attn.collect(g, prefix + ".attn");
        } else {
            fc1.collect(g, prefix + ".fc1");
            fc2.collect(g, prefix + ".fc2");
        }
    }
};

template <typename Scalar>
using StageFeatures = std::vector<Tensor<Scalar>>;

// ---------------------------------------------------------------------------
// bundle
// ---------------------------------------------------------------------------

// The whole network: frozen backbone, GSE, injectors, segmentation decoder,
// reconstruction decoder and the visual prompt, with ownership of the
// parameter groups the optimizer walks.
template <typename Scalar>
struct ModelBundle {
    ModelConfig cfg;

    // backbone (frozen)
    Conv2dLayer<Scalar> patch_embed;
    Tensor<Scalar> pos_emb;
    std::vector<TransformerBlock<Scalar>> blocks;

    // geospatial semantic extractor (five conv+relu stages)
    std::vector<Conv2dLayer<Scalar>> gse;

    std::vector<Injector<Scalar>> injectors;  // one per injection index

    // segmentation decoder: conv -> resize, twice, then 1x1 head
    Conv2dLayer<Scalar> dec_conv1, dec_conv2, dec_head;
    int dec_up1 = 2, dec_up2 = 2;

    // reconstruction decoder
    std::vector<Conv2dLayer<Scalar>> aspp_branches;  // dilation 2^i per stage
    Conv2dLayer<Scalar> aspp_fuse, aspp_proj;
    LinearLayer<Scalar> mim_linear;                  // linear variant

    VisualPrompt<Scalar> prompt;

    std::vector<ParamGroup<Scalar>> groups;

    ParamGroup<Scalar>& group(const std::string& name) {
        for (auto& g : groups)
            if (g.name == name) return g;
        throw ContractError("no parameter group named " + name);
    }

    const ParamGroup<Scalar>& group(const std::string& name) const {
        for (const auto& g : groups)
            if (g.name == name) return g;
        throw ContractError("no parameter group named " + name);
    }

    bool has_group(const std::string& name) const {
        return std::any_of(groups.begin(), groups.end(), [&](const auto& g) { return g.name == name; });
    }

    std::vector<std::string> trainable_group_names() const {
        std::vector<std::string> r;
        for (const auto& g : groups)
            if (g.trainable) r.push_back(g.name);
        return r;
    }

    void zero_grad() {
        for (auto& g : groups) g.zero_grad();
    }
};

// Stride plan landing the five GSE stages on the token grid: factors of the
// patch size distributed over the layers, powers of two first.
inline std::vector<int> gse_stride_plan(int patch) {
    std::vector<int> strides(5, 1);
    int rest = patch;
    std::size_t slot = 0;
    while (rest % 2 == 0 && rest > 1 && slot < 5) {
        strides[slot++] = 2;
        rest /= 2;
    }
    if (rest > 1) {
        if (slot >= 5) throw ConfigError("patch " + std::to_string(patch) + " needs more than 5 GSE strides");
        strides[slot++] = rest;
    }
    return strides;
}

template <typename Scalar>
ModelBundle<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelBundle<Scalar> m;
    m.cfg = cfg;
    const int d = cfg.embed_dim;
    // One derived stream per component, so ablation variants that share a
    // component share its initialization for the same seed.
    Rng rng = Rng::derive(seed, 1);

    // --- backbone
    m.patch_embed.w = init::he_conv<Scalar>(d, cfg.in_channels, cfg.patch, rng);
    m.patch_embed.b = Tensor<Scalar>(Shape{d});
    m.patch_embed.stride = cfg.patch;
    m.pos_emb = init::normal<Scalar>({cfg.tokens(), d}, 0.02, rng);
    m.blocks.resize(static_cast<std::size_t>(cfg.depth));
    for (auto& blk : m.blocks) {
        blk.ln1.gamma = Tensor<Scalar>(Shape{d}, Scalar(1));
        blk.ln1.beta = Tensor<Scalar>(Shape{d});
        blk.ln2.gamma = Tensor<Scalar>(Shape{d}, Scalar(1));
        blk.ln2.beta = Tensor<Scalar>(Shape{d});
        blk.attn = make_attention<Scalar>(d, cfg.heads, rng, false);
        const int hidden = d * cfg.mlp_ratio;
        blk.fc1.w = init::normal<Scalar>({d, hidden}, std::sqrt(2.0 / d), rng);
        blk.fc1.b = Tensor<Scalar>(Shape{hidden});
        blk.fc2.w = init::normal<Scalar>({hidden, d}, std::sqrt(1.0 / hidden), rng);
        blk.fc2.b = Tensor<Scalar>(Shape{d});
    }

    // --- GSE: fixed ramp 3 -> 16 -> 32 -> 64 -> d -> d
    rng = Rng::derive(seed, 2);
    if (cfg.use_gse) {
        const std::vector<int> chans{cfg.in_channels, 16, 32, 64, d, d};
        const auto strides = gse_stride_plan(cfg.patch);
        m.gse.resize(5);
        for (int i = 0; i < 5; ++i) {
            m.gse[static_cast<std::size_t>(i)].w = init::he_conv<Scalar>(chans[static_cast<std::size_t>(i + 1)],
                                                                         chans[static_cast<std::size_t>(i)], 3, rng);
            m.gse[static_cast<std::size_t>(i)].b = Tensor<Scalar>(Shape{chans[static_cast<std::size_t>(i + 1)]});
            m.gse[static_cast<std::size_t>(i)].stride = strides[static_cast<std::size_t>(i)];
            m.gse[static_cast<std::size_t>(i)].padding = 1;
        }
        for (std::size_t i = 0; i < cfg.injections().size(); ++i) {
            Injector<Scalar> inj;
            inj.kind = cfg.injector;
            if (cfg.injector == InjectorKind::CrossAttention) {
                inj.attn = make_attention<Scalar>(d, cfg.heads, rng, /*zero_out_proj=*/true);
            } else {
                inj.fc1.w = init::normal<Scalar>({d, cfg.ffn_hidden}, std::sqrt(2.0 / d), rng);
                inj.fc1.b = Tensor<Scalar>(Shape{cfg.ffn_hidden});
                inj.fc2.w = Tensor<Scalar>(Shape{cfg.ffn_hidden, d});  // zero-init
                inj.fc2.b = Tensor<Scalar>(Shape{d});
            }
            m.injectors.push_back(std::move(inj));
        }
    }

    // --- segmentation decoder: factor the patch into two upsamples
    rng = Rng::derive(seed, 3);
    m.dec_up2 = cfg.patch % 2 == 0 ? 2 : cfg.patch;
    m.dec_up1 = cfg.patch / m.dec_up2;
    m.dec_conv1.w = init::he_conv<Scalar>(cfg.decoder_c1, d, 3, rng);
    m.dec_conv1.b = Tensor<Scalar>(Shape{cfg.decoder_c1});
    m.dec_conv1.padding = 1;
    m.dec_conv2.w = init::he_conv<Scalar>(cfg.decoder_c2, cfg.decoder_c1, 3, rng);
    m.dec_conv2.b = Tensor<Scalar>(Shape{cfg.decoder_c2});
    m.dec_conv2.padding = 1;
    m.dec_head.w = init::he_conv<Scalar>(cfg.num_classes, cfg.decoder_c2, 1, rng);
    m.dec_head.b = Tensor<Scalar>(Shape{cfg.num_classes});

    // --- reconstruction decoder
    rng = Rng::derive(seed, 4);
    if (cfg.use_mim) {
        if (cfg.mim_decoder == MimDecoderKind::Aspp) {
            const auto taps = cfg.taps();
            m.aspp_branches.resize(taps.size());
            int dil = 1;
            for (std::size_t i = 0; i < taps.size(); ++i) {
                auto& br = m.aspp_branches[i];
                br.w = init::he_conv<Scalar>(cfg.aspp_branch_channels, d, 3, rng);
                br.b = Tensor<Scalar>(Shape{cfg.aspp_branch_channels});
                br.dilation = dil;
                br.padding = dil;
                dil *= 2;
            }
            const int cat = cfg.aspp_branch_channels * static_cast<int>(taps.size());
            m.aspp_fuse.w = init::he_conv<Scalar>(cfg.aspp_fuse_channels, cat, 1, rng);
            m.aspp_fuse.b = Tensor<Scalar>(Shape{cfg.aspp_fuse_channels});
            m.aspp_proj.w = init::he_conv<Scalar>(cfg.in_channels, cfg.aspp_fuse_channels, 1, rng);
            m.aspp_proj.b = Tensor<Scalar>(Shape{cfg.in_channels});
        } else {
            const int out = cfg.in_channels * cfg.patch * cfg.patch;
            m.mim_linear.w = init::normal<Scalar>({d, out}, std::sqrt(1.0 / d), rng);
            m.mim_linear.b = Tensor<Scalar>(Shape{out});
        }
        m.prompt.v = Tensor<Scalar>(Shape{cfg.in_channels, cfg.image_h, cfg.image_w});  // zeros
        m.prompt.trainable = cfg.train_visual_prompt;
    }

    // --- parameter groups; the backbone is shared but frozen
    {
        ParamGroup<Scalar> g;
        g.name = "backbone";
        g.trainable = false;
        m.patch_embed.collect(g, "patch_embed");
        m.pos_emb = g.add("pos_emb", m.pos_emb);
        for (std::size_t i = 0; i < m.blocks.size(); ++i)
            m.blocks[i].collect(g, "block" + std::to_string(i));
        m.groups.push_back(std::move(g));
    }
    if (cfg.use_gse) {
        ParamGroup<Scalar> g;
        g.name = "gse";
        for (std::size_t i = 0; i < m.gse.size(); ++i) m.gse[i].collect(g, "conv" + std::to_string(i));
        m.groups.push_back(std::move(g));
        for (std::size_t i = 0; i < m.injectors.size(); ++i) {
            ParamGroup<Scalar> gi;
            gi.name = "injector" + std::to_string(i);
            m.injectors[i].collect(gi, "inj");
            m.groups.push_back(std::move(gi));
        }
    }
    {
        ParamGroup<Scalar> g;
        g.name = "seg_decoder";
        m.dec_conv1.collect(g, "conv1");
        m.dec_conv2.collect(g, "conv2");
        m.dec_head.collect(g, "head");
        m.groups.push_back(std::move(g));
    }
    if (cfg.use_mim) {
        ParamGroup<Scalar> g;
        g.name = "mim_decoder";
        if (cfg.mim_decoder == MimDecoderKind::Aspp) {
            for (std::size_t i = 0; i < m.aspp_branches.size(); ++i)
                m.aspp_branches[i].collect(g, "branch" + std::to_string(i));
            m.aspp_fuse.collect(g, "fuse");
            m.aspp_proj.collect(g, "proj");
        } else {
            m.mim_linear.collect(g, "linear");
        }
        m.groups.push_back(std::move(g));

        ParamGroup<Scalar> gv;
        gv.name = "visual_prompt";
        gv.trainable = cfg.train_visual_prompt;
        m.prompt.v = gv.add("v", m.prompt.v);
        m.groups.push_back(std::move(gv));
    }
    return m;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

// Five conv+relu stages whose final map lands on the token grid, flattened to
// (L, d) geospatial queries.
template <typename Scalar>
Tensor<Scalar> gse_forward(const Tensor<Scalar>& x, const ModelBundle<Scalar>& m) {
    if (!m.cfg.use_gse) throw ContractError("gse_forward on a bundle built without GSE");
    Tensor<Scalar> h = x;
    for (const auto& layer : m.gse) h = relu(layer.forward(h));
    if (h.dim(1) != m.cfg.grid_h() || h.dim(2) != m.cfg.grid_w())
        throw DimensionError("gse output " + shape_str(h.shape()) + " missed the token grid");
    return map_to_tokens(h);
}

template <typename Scalar>
Tensor<Scalar> injector_forward(const Tensor<Scalar>& q, const Tensor<Scalar>& feat,
                                const Injector<Scalar>& inj) {
    return inj.forward(q, feat);
}

// Patchify plus transformer blocks. When inject is set (and the bundle has a
// GSE), each injection-index block output is residually enhanced with the
// injector's cross-attention; the MIM flow runs with inject = false.
// Backbone parameters are frozen and receive no gradient either way.
template <typename Scalar>
StageFeatures<Scalar> backbone_forward(const Tensor<Scalar>& x, const ModelBundle<Scalar>& m, bool inject) {
    const auto& cfg = m.cfg;
    if (x.ndim() != 3 || x.dim(0) != cfg.in_channels)
        throw DimensionError("backbone: want (" + std::to_string(cfg.in_channels) + ",H,W), got " +
                             shape_str(x.shape()));
    if (x.dim(1) % cfg.patch != 0 || x.dim(2) % cfg.patch != 0)
        throw ConfigError("backbone: image " + shape_str(x.shape()) + " not divisible by patch " +
                          std::to_string(cfg.patch));

    const bool do_inject = inject && cfg.use_gse;
    Tensor<Scalar> queries;
    if (do_inject) queries = gse_forward(x, m);

    Tensor<Scalar> tokens = add(map_to_tokens(m.patch_embed.forward(x)), m.pos_emb);

    const auto taps = cfg.taps();
    const auto inj_at = cfg.injections();
    StageFeatures<Scalar> feats;
    feats.reserve(taps.size());
    std::size_t next_inj = 0;
    for (int i = 0; i < cfg.depth; ++i) {
        tokens = m.blocks[static_cast<std::size_t>(i)].forward(tokens);
        if (next_inj < inj_at.size() && inj_at[next_inj] == i) {
            if (do_inject)
                tokens = add(tokens, injector_forward(queries, tokens, m.injectors[next_inj]));
            ++next_inj;
        }
        if (std::find(taps.begin(), taps.end(), i) != taps.end()) feats.push_back(tokens);
    }
    return feats;
}

// Final-stage tokens -> spatial map -> conv+resize twice -> per-pixel logits.
template <typename Scalar>
Tensor<Scalar> decode_segmentation(const StageFeatures<Scalar>& feats, const ModelBundle<Scalar>& m) {
    const auto& cfg = m.cfg;
    Tensor<Scalar> h = tokens_to_map(feats.back(), cfg.grid_h(), cfg.grid_w());
    h = relu(m.dec_conv1.forward(h));
    h = bilinear_resize(h, cfg.grid_h() * m.dec_up1, cfg.grid_w() * m.dec_up1);
    h = relu(m.dec_conv2.forward(h));
    h = bilinear_resize(h, cfg.image_h, cfg.image_w);
    return m.dec_head.forward(h);
}

// Segmentation flow with the sample gate: u = 0 reads the original image,
// u = 1 the styled one.
template <typename Scalar>
Tensor<Scalar> seg_forward(const Tensor<Scalar>& x, const ModelBundle<Scalar>& m, int u,
                           const std::optional<Tensor<Scalar>>& x_s = std::nullopt) {
    if (u != 0 && u != 1) throw ContractError("seg_forward: gate must be 0 or 1");
    if (u == 1 && !x_s.has_value()) throw ContractError("seg_forward: u = 1 requires the styled image");
    const Tensor<Scalar>& input = (u == 1) ? *x_s : x;
    auto feats = backbone_forward(input, m, /*inject=*/true);
    return decode_segmentation(feats, m);
}

// Reconstruction flow: backbone without GSE/injectors, every tapped stage
// refined by a dilated conv branch, concatenated, fused and projected back to
// the image; or the single-linear ablation decoder.
template <typename Scalar>
Tensor<Scalar> mim_forward(const Tensor<Scalar>& x, const ModelBundle<Scalar>& m) {
    const auto& cfg = m.cfg;
    if (!cfg.use_mim) throw ContractError("mim_forward on a bundle built without the MIM flow");
    auto feats = backbone_forward(x, m, /*inject=*/false);
    if (feats.empty()) throw ConfigError("mim_forward: no stage taps configured");

    if (cfg.mim_decoder == MimDecoderKind::Linear) {
        // Each final-stage token reconstructs its own patch.
        Tensor<Scalar> rows = m.mim_linear.forward(feats.back());
        const int p = cfg.patch, c = cfg.in_channels, gh = cfg.grid_h(), gw = cfg.grid_w();
        const int L = gh * gw, row_w = c * p * p;
        std::vector<Scalar> out(static_cast<std::size_t>(c) * cfg.image_h * cfg.image_w);
        for (int t = 0; t < L; ++t) {
            const int gy = t / gw, gx = t % gw;
            for (int ch = 0; ch < c; ++ch)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        out[(static_cast<std::size_t>(ch) * cfg.image_h + gy * p + py) * cfg.image_w + gx * p +
                            px] = rows.data()[static_cast<std::size_t>(t) * row_w + (ch * p + py) * p + px];
        }
        auto rn = rows.node();
        const int ih = cfg.image_h, iw = cfg.image_w;
        return detail::make_op<Scalar>(Shape{c, ih, iw}, std::move(out), {rn},
            [rn, p, c, gh, gw, L, row_w, ih, iw](detail::TensorNode<Scalar>& o) {
                rn->ensure_grad();
                for (int t = 0; t < L; ++t) {
                    const int gy = t / gw, gx = t % gw;
                    for (int ch = 0; ch < c; ++ch)
                        for (int py = 0; py < p; ++py)
                            for (int px = 0; px < p; ++px)
                                rn->grad[static_cast<std::size_t>(t) * row_w + (ch * p + py) * p + px] +=
                                    o.grad[(static_cast<std::size_t>(ch) * ih + gy * p + py) * iw + gx * p + px];
                }
            });
    }

    std::vector<Tensor<Scalar>> refined;
    refined.reserve(feats.size());
    for (std::size_t i = 0; i < feats.size(); ++i) {
        Tensor<Scalar> fmap = tokens_to_map(feats[i], cfg.grid_h(), cfg.grid_w());
        refined.push_back(relu(m.aspp_branches[i].forward(fmap)));
    }
    Tensor<Scalar> fused = relu(m.aspp_fuse.forward(concat_channels(refined)));
    Tensor<Scalar> img = m.aspp_proj.forward(fused);
    return bilinear_resize(img, cfg.image_h, cfg.image_w);
}

// Eq-style convenience: reconstruct the masked image and, when the gate chose
// the styled branch, the styled image too.
template <typename Scalar>
std::pair<Tensor<Scalar>, std::optional<Tensor<Scalar>>> mim_forward(
    const Tensor<Scalar>& x_m, const std::optional<Tensor<Scalar>>& x_s, const ModelBundle<Scalar>& m) {
    std::optional<Tensor<Scalar>> rec_s;
    if (x_s) rec_s = mim_forward(*x_s, m);
    return {mim_forward(x_m, m), std::move(rec_s)};
}

// Closed-form parameter count of the five GSE convs for a given ramp.
inline std::int64_t gse_param_count(int in_channels, int embed_dim) {
    const std::vector<int> chans{in_channels, 16, 32, 64, embed_dim, embed_dim};
    std::int64_t n = 0;
    for (int i = 0; i < 5; ++i)
        n += static_cast<std::int64_t>(chans[static_cast<std::size_t>(i + 1)]) *
                 chans[static_cast<std::size_t>(i)] * 9 +
             chans[static_cast<std::size_t>(i + 1)];
    return n;
}

}  // namespace dgseg
