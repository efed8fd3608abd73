#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgseg/data.hpp"
#include "dgseg/losses.hpp"
#include "dgseg/model.hpp"
#include "dgseg/optim.hpp"
#include "dgseg/rng.hpp"
#include "dgseg/style.hpp"

namespace dgseg {

struct MaskParams {
    double tau_m = 0.5;
    int block = 0;  // 0 = scale the 512-reference block 64 to the image side, min 4
};

struct TrainConfig {
    std::int64_t iterations = 2000;
    int batch_size = 1;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    double gate_p = 0.1;
    MaskParams styled_mask{0.1, 0};
    MaskParams masked_mask{0.7, 0};
    Norm mim_norm = Norm::L1;
    Norm delta_norm = Norm::L1;
    bool use_style = true;
    bool mim_masked_only = false;

    std::uint64_t seed = 0;
    std::int64_t pretrain_iters = 0;  // optional backbone warm-up before freezing
    std::int64_t checkpoint_every = 0;
    std::int64_t log_every = 1;
    bool debug_invariants = false;

    ModelConfig model;

    void validate() const {
        model.validate();
        if (iterations < 1) throw ConfigError("iterations must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (gate_p < 0.0 || gate_p > 1.0) throw ConfigError("gate probability outside [0,1]");
        for (const auto* m : {&styled_mask, &masked_mask}) {
            if (m->tau_m < 0.0 || m->tau_m > 1.0) throw ConfigError("tau_m outside [0,1]");
            if (m->block < 0) throw ConfigError("block size must be >= 0 (0 = auto)");
        }
    }

    // Paper-reference blocks are quoted at 512px; scale with the image side.
    int resolve_block(const MaskParams& m) const {
        if (m.block > 0) return m.block;
        const int side = std::min(model.image_h, model.image_w);
        return std::max(4, static_cast<int>(std::lround(64.0 * side / 512.0)));
    }
};

inline void to_json(nlohmann::json& j, const MaskParams& m) {
    j = nlohmann::json{{"tau_m", m.tau_m}, {"block", m.block}};
}

inline void from_json(const nlohmann::json& j, MaskParams& m) {
    m.tau_m = j.value("tau_m", m.tau_m);
    m.block = j.value("block", m.block);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"iterations", c.iterations},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"weight_decay", c.weight_decay},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"adam_eps", c.adam_eps},
                       {"gate_p", c.gate_p},
                       {"styled_mask", c.styled_mask},
                       {"masked_mask", c.masked_mask},
                       {"mim_norm", norm_name(c.mim_norm)},
                       {"delta_norm", norm_name(c.delta_norm)},
                       {"use_style", c.use_style},
                       {"mim_masked_only", c.mim_masked_only},
                       {"seed", c.seed},
                       {"pretrain_iters", c.pretrain_iters},
                       {"checkpoint_every", c.checkpoint_every},
                       {"log_every", c.log_every},
                       {"debug_invariants", c.debug_invariants},
                       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    TrainConfig d;
    c.iterations = j.value("iterations", d.iterations);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.adam_eps = j.value("adam_eps", d.adam_eps);
    c.gate_p = j.value("gate_p", d.gate_p);
    if (j.contains("styled_mask")) j.at("styled_mask").get_to(c.styled_mask);
    if (j.contains("masked_mask")) j.at("masked_mask").get_to(c.masked_mask);
    c.mim_norm = parse_norm(j.value("mim_norm", "l1"));
    c.delta_norm = parse_norm(j.value("delta_norm", "l1"));
    c.use_style = j.value("use_style", d.use_style);
    c.mim_masked_only = j.value("mim_masked_only", d.mim_masked_only);
    c.seed = j.value("seed", d.seed);
    c.pretrain_iters = j.value("pretrain_iters", d.pretrain_iters);
    c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
    c.log_every = j.value("log_every", d.log_every);
    c.debug_invariants = j.value("debug_invariants", d.debug_invariants);
    if (j.contains("model")) j.at("model").get_to(c.model);
}

// The standard component/hyperparameter run matrix (16 rows): baseline, each
// component alone, pairs, the full system, injector/decoder swaps, the gate
// probability sweep and the loss swaps. Every row is a flag change on the
// base config.
inline std::vector<std::pair<std::string, TrainConfig>> standard_ablation_rows(const TrainConfig& base) {
    auto row = [&](const char* name, bool gse, bool mim, bool style) {
        TrainConfig c = base;
        c.model.use_gse = gse;
        c.model.use_mim = mim;
        c.use_style = style;
        return std::make_pair(std::string(name), c);
    };
    std::vector<std::pair<std::string, TrainConfig>> rows;
    rows.push_back(row("R1-baseline", false, false, false));
    rows.push_back(row("R2-gse", true, false, false));
    rows.push_back(row("R3-mim", false, true, false));
    rows.push_back(row("R4-style", false, false, true));
    rows.push_back(row("R5-gse-mim", true, true, false));
    rows.push_back(row("R6-gse-style", true, false, true));
    rows.push_back(row("R7-mim-style", false, true, true));
    rows.push_back(row("R8-full", true, true, true));
    {
        auto r = row("R9-injector-ffn", true, true, true);
        r.second.model.injector = InjectorKind::Ffn;
        rows.push_back(std::move(r));
    }
    {
        auto r = row("R10-mim-linear", true, true, true);
        r.second.model.mim_decoder = MimDecoderKind::Linear;
        rows.push_back(std::move(r));
    }
    int idx = 11;
    for (double p : {0.3, 0.5, 0.7, 0.9}) {
        auto r = row(("R" + std::to_string(idx++) + "-p" + std::to_string(p).substr(0, 3)).c_str(), true,
                     true, true);
        r.second.gate_p = p;
        rows.push_back(std::move(r));
    }
    {
        auto r = row("R15-mim-l2", true, true, true);
        r.second.mim_norm = Norm::L2;
        rows.push_back(std::move(r));
    }
    {
        auto r = row("R16-delta-l2", true, true, true);
        r.second.delta_norm = Norm::L2;
        rows.push_back(std::move(r));
    }
    return rows;
}

// Fixed-capacity record of recent loss reports.
struct LossHistory {
    std::size_t capacity = 512;
    std::vector<LossReport> items;

    void push(const LossReport& r) {
        items.push_back(r);
        if (items.size() > capacity) items.erase(items.begin());
    }
};

template <typename Scalar>
struct TrainState {
    TrainConfig cfg;
    ModelBundle<Scalar> bundle;
    AdamW<Scalar> opt;
    Rng aug_rng;   // masks, gate, style embedding draws, in Algorithm order
    Rng data_rng;  // sample selection
    std::int64_t iteration = 0;
    LossHistory history;
    std::uint64_t backbone_hash = 0;  // frozen-contract sentinel
};

namespace train_detail {

template <typename Scalar>
std::uint64_t hash_group(const ParamGroup<Scalar>& g) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [n, t] : g.params)
        for (Scalar v : t.data()) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
            for (std::size_t i = 0; i < sizeof(Scalar); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        }
    return h;
}

}  // namespace train_detail

template <typename Scalar>
TrainState<Scalar> init_train_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<Scalar> st;
    st.cfg = cfg;
    st.bundle = build_model<Scalar>(cfg.model, cfg.seed);
    AdamWConfig<Scalar> ocfg;
    ocfg.lr = static_cast<Scalar>(cfg.lr);
    ocfg.beta1 = static_cast<Scalar>(cfg.beta1);
    ocfg.beta2 = static_cast<Scalar>(cfg.beta2);
    ocfg.eps = static_cast<Scalar>(cfg.adam_eps);
    ocfg.weight_decay = static_cast<Scalar>(cfg.weight_decay);
    st.opt = AdamW<Scalar>(ocfg);
    st.aug_rng = Rng::derive(cfg.seed, 0xA06);
    st.data_rng = Rng::derive(cfg.seed, 0xDA7A);
    st.backbone_hash = train_detail::hash_group(st.bundle.group("backbone"));
    return st;
}

// ---------------------------------------------------------------------------
// the per-iteration step (Algorithm order: mask, gate, style, flows, losses)
// ---------------------------------------------------------------------------

template <typename Scalar>
LossReport train_step(TrainState<Scalar>& state, const SegSample<Scalar>& sample,
                      const StyleStats<Scalar>& stats) {
    auto& cfg = state.cfg;
    auto& m = state.bundle;
    const auto& x = sample.image;
    if (x.dim(1) != cfg.model.image_h || x.dim(2) != cfg.model.image_w)
        throw ConfigError("train_step: sample " + shape_str(x.shape()) + " does not match model input " +
                          std::to_string(cfg.model.image_h) + "x" + std::to_string(cfg.model.image_w));

    // 1. block mask for the masked image, then X_M = X (.) M (.) v
    std::optional<BlockMask> mask_m;
    std::optional<Tensor<Scalar>> x_m;
    if (cfg.model.use_mim) {
        mask_m = generate_mask(cfg.model.image_h, cfg.model.image_w, cfg.resolve_block(cfg.masked_mask),
                               cfg.masked_mask.tau_m, state.aug_rng);
        x_m = make_masked_image(x, *mask_m, m.prompt);
    }

    // 2. sample gate
    const int u = (cfg.use_style && state.aug_rng.bernoulli(cfg.gate_p)) ? 1 : 0;

    // 3. styled image when the gate selects it
    std::optional<Tensor<Scalar>> x_s;
    if (u == 1) {
        BlockMask mask_s = generate_mask(cfg.model.image_h, cfg.model.image_w,
                                         cfg.resolve_block(cfg.styled_mask), cfg.styled_mask.tau_m,
                                         state.aug_rng);
        StyleEmbedding<Scalar> eps = extract_style(x);
        StyleEmbedding<Scalar> eps_o = sample_embedding(stats, state.aug_rng);
        x_s = compose_styled(x, style_transfer(eps_o, eps, x), mask_s);
    }

    // 4. segmentation flow
    Tensor<Scalar> l_seg = seg_loss(seg_forward(x, m, u, x_s), sample.label);

    // 5. reconstruction flow; the masked branch always targets the original X
    Tensor<Scalar> total = l_seg;
    Tensor<Scalar> l_mim = Tensor<Scalar>::scalar(Scalar(0));
    Tensor<Scalar> l_delta = Tensor<Scalar>::scalar(Scalar(0));
    if (cfg.model.use_mim) {
        Tensor<Scalar> rec_m = mim_forward(*x_m, m);
        l_mim = cfg.mim_masked_only ? masked_region_loss(rec_m, x, mask_m->full, cfg.mim_norm)
                                    : pixel_norm_loss(rec_m, x, cfg.mim_norm);
        if (u == 1) {
            Tensor<Scalar> rec_s = mim_forward(*x_s, m);
            l_mim = add(l_mim, pixel_norm_loss(rec_s, *x_s, cfg.mim_norm));
            l_delta = delta_loss(rec_m, rec_s, cfg.delta_norm);
            total = add(total, add(l_mim, l_delta));
        } else {
            total = add(total, l_mim);
        }
    }

    LossReport report = compose_total(u, static_cast<double>(l_seg.item()),
                                      static_cast<double>(l_mim.item()),
                                      static_cast<double>(l_delta.item()));
    if (!std::isfinite(report.total))
        throw TrainingError("non-finite loss at iteration " + std::to_string(state.iteration) +
                            ": l_seg=" + std::to_string(report.l_seg) + " l_mim=" +
                            std::to_string(report.l_mim) + " l_delta=" + std::to_string(report.l_delta));
    if (report.total != report.l_seg + report.l_mim + report.l_delta || (report.u == 0 && report.l_delta != 0.0))
        throw ContractError("loss report arithmetic violated");

    total.backward();
    state.opt.step(m.groups);
    m.zero_grad();

    if (cfg.debug_invariants && state.iteration % 50 == 0 &&
        train_detail::hash_group(m.group("backbone")) != state.backbone_hash)
        throw TrainingError("frozen backbone changed at iteration " + std::to_string(state.iteration));

    ++state.iteration;
    state.history.push(report);
    return report;
}

// ---------------------------------------------------------------------------
// checkpointing (bit-exact binary container)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace train_detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

inline void write_str(std::ostream& os, const std::string& s) {
    write_pod<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_str(std::istream& is) {
    const auto n = read_pod<std::uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}

template <typename Scalar>
void write_vec(std::ostream& os, const std::vector<Scalar>& v) {
    write_pod<std::uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Scalar)));
}

template <typename Scalar>
std::vector<Scalar> read_vec(std::istream& is) {
    const auto n = read_pod<std::uint64_t>(is);
    std::vector<Scalar> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(Scalar)));
    return v;
}

}  // namespace train_detail

template <typename Scalar>
void save_checkpoint(const TrainState<Scalar>& st, const std::string& path) {
    namespace td = train_detail;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + path);
    f.write("DGCKPT\0", 7);
    td::write_pod<std::uint32_t>(f, kCheckpointVersion);
    td::write_pod<std::uint32_t>(f, sizeof(Scalar));

    nlohmann::json hdr;
    hdr["config"] = st.cfg;
    hdr["iteration"] = st.iteration;
    hdr["aug_rng"] = st.aug_rng.serialize();
    hdr["data_rng"] = st.data_rng.serialize();
    hdr["opt_timestep"] = st.opt.timestep();
    auto hist = nlohmann::json::array();
    for (const auto& r : st.history.items)
        hist.push_back({{"l_seg", r.l_seg}, {"l_mim", r.l_mim}, {"l_delta", r.l_delta},
                        {"total", r.total}, {"u", r.u}});
    hdr["history"] = hist;
    td::write_str(f, hdr.dump());

    std::uint64_t ntensors = 0;
    for (const auto& g : st.bundle.groups) ntensors += g.params.size();
    td::write_pod<std::uint64_t>(f, ntensors);
    for (const auto& g : st.bundle.groups)
        for (const auto& [n, t] : g.params) {
            td::write_str(f, g.name + "/" + n);
            td::write_vec(f, t.data());
        }

    const auto& slots = st.opt.slots();
    td::write_pod<std::uint64_t>(f, slots.size());
    for (const auto& [name, slot] : slots) {
        td::write_str(f, name);
        td::write_vec(f, slot.m);
        td::write_vec(f, slot.v);
    }
}

template <typename Scalar>
TrainState<Scalar> load_checkpoint(const std::string& path) {
    namespace td = train_detail;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path);
    char magic[7];
    f.read(magic, 7);
    if (std::memcmp(magic, "DGCKPT\0", 7) != 0) throw IoError(path + ": not a checkpoint file");
    if (td::read_pod<std::uint32_t>(f) != kCheckpointVersion) throw IoError(path + ": unsupported version");
    if (td::read_pod<std::uint32_t>(f) != sizeof(Scalar))
        throw IoError(path + ": scalar width differs from this build");

    nlohmann::json hdr = nlohmann::json::parse(td::read_str(f));
    TrainConfig cfg = hdr.at("config").get<TrainConfig>();
    TrainState<Scalar> st = init_train_state<Scalar>(cfg);
    st.iteration = hdr.at("iteration").get<std::int64_t>();
    st.aug_rng.deserialize(hdr.at("aug_rng").get<std::string>());
    st.data_rng.deserialize(hdr.at("data_rng").get<std::string>());
    for (const auto& r : hdr.at("history"))
        st.history.items.push_back({r.at("l_seg").get<double>(), r.at("l_mim").get<double>(),
                                    r.at("l_delta").get<double>(), r.at("total").get<double>(),
                                    r.at("u").get<int>()});

    const auto ntensors = td::read_pod<std::uint64_t>(f);
    std::unordered_map<std::string, std::vector<Scalar>> tensors;
    for (std::uint64_t i = 0; i < ntensors; ++i) {
        std::string name = td::read_str(f);
        tensors[name] = td::read_vec<Scalar>(f);
    }
    for (auto& g : st.bundle.groups)
        for (auto& [n, t] : g.params) {
            auto it = tensors.find(g.name + "/" + n);
            if (it == tensors.end()) throw IoError(path + ": missing tensor " + g.name + "/" + n);
            if (it->second.size() != t.data().size())
                throw IoError(path + ": tensor " + g.name + "/" + n + " has wrong size");
            t.data() = it->second;
        }

    const auto nslots = td::read_pod<std::uint64_t>(f);
    std::vector<std::pair<std::string, typename AdamW<Scalar>::Slot>> slots;
    for (std::uint64_t i = 0; i < nslots; ++i) {
        std::string name = td::read_str(f);
        auto mvec = td::read_vec<Scalar>(f);
        auto vvec = td::read_vec<Scalar>(f);
        slots.push_back({std::move(name), {std::move(mvec), std::move(vvec)}});
    }
    st.opt.restore(hdr.at("opt_timestep").get<std::int64_t>(), std::move(slots));
    st.backbone_hash = train_detail::hash_group(st.bundle.group("backbone"));
    return st;
}

// ---------------------------------------------------------------------------
// the run loop
// ---------------------------------------------------------------------------

// Optional MIM-only warm-up that trains the backbone before freezing it; the
// main loop then runs with the standard trainable set.
template <typename Scalar>
void pretrain_backbone(TrainState<Scalar>& state, const std::vector<SegSample<Scalar>>& dataset) {
    auto& cfg = state.cfg;
    if (cfg.pretrain_iters <= 0) return;
    if (!cfg.model.use_mim) throw ConfigError("pretrain requires the MIM flow");
    auto& backbone = state.bundle.group("backbone");
    backbone.trainable = true;
    for (auto& [n, t] : backbone.params) t.set_requires_grad(true);

    AdamWConfig<Scalar> ocfg = state.opt.config();
    AdamW<Scalar> warm_opt(ocfg);
    Rng warm_aug = Rng::derive(cfg.seed, 0x77A1);
    Rng warm_data = Rng::derive(cfg.seed, 0x77A2);
    for (std::int64_t i = 0; i < cfg.pretrain_iters; ++i) {
        const auto& s = dataset[warm_data.index(dataset.size())];
        BlockMask mask = generate_mask(cfg.model.image_h, cfg.model.image_w,
                                       cfg.resolve_block(cfg.masked_mask), cfg.masked_mask.tau_m, warm_aug);
        // Plain mask-out (no prompt) so the warm-up signal is non-degenerate.
        Tensor<Scalar> x_masked(s.image.shape());
        for (int c = 0; c < cfg.model.in_channels; ++c)
            for (int y = 0; y < cfg.model.image_h; ++y)
                for (int x = 0; x < cfg.model.image_w; ++x) {
                    const std::size_t idx =
                        (static_cast<std::size_t>(c) * cfg.model.image_h + y) * cfg.model.image_w + x;
                    x_masked.data()[idx] = mask.full(y, x) ? s.image.data()[idx] : Scalar(0);
                }
        auto loss = pixel_norm_loss(mim_forward(x_masked, state.bundle), s.image, cfg.mim_norm);
        loss.backward();
        warm_opt.step(state.bundle.groups);
        state.bundle.zero_grad();
    }

    backbone.trainable = false;
    for (auto& [n, t] : backbone.params) t.set_requires_grad(false);
    state.backbone_hash = train_detail::hash_group(backbone);
}

template <typename Scalar>
TrainState<Scalar> run_training(const TrainConfig& cfg, const std::vector<SegSample<Scalar>>& dataset,
                                const StyleStats<Scalar>& stats, const std::string& out_dir = "",
                                std::vector<LossReport>* trace = nullptr) {
    cfg.validate();
    if (dataset.empty()) throw ConfigError("run_training: empty dataset");
    for (const auto& s : dataset)
        if (s.image.dim(0) != cfg.model.in_channels || s.image.dim(1) != cfg.model.image_h ||
            s.image.dim(2) != cfg.model.image_w)
            throw ConfigError("run_training: sample " + s.source_path + " is " + shape_str(s.image.shape()) +
                              ", model expects (" + std::to_string(cfg.model.in_channels) + "," +
                              std::to_string(cfg.model.image_h) + "," + std::to_string(cfg.model.image_w) + ")");

    TrainState<Scalar> st = init_train_state<Scalar>(cfg);
    pretrain_backbone(st, dataset);

    std::ofstream metrics;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        metrics.open(fs::path(out_dir) / "metrics.jsonl");
        std::ofstream cfgout(fs::path(out_dir) / "config.json");
        cfgout << nlohmann::json(cfg).dump(2) << "\n";
    }

    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        // Per-sample gates within a batch; losses averaged before the step.
        LossReport report;
        if (cfg.batch_size == 1) {
            const auto& s = dataset[st.data_rng.index(dataset.size())];
            report = train_step(st, s, stats);
        } else {
            report = batch_step(st, dataset, stats);
        }

        if (trace) trace->push_back(report);
        if (metrics.is_open() && (it % cfg.log_every == 0 || it + 1 == cfg.iterations)) {
            nlohmann::json line{{"iteration", st.iteration - 1}, {"l_seg", report.l_seg},
                                {"l_mim", report.l_mim},        {"l_delta", report.l_delta},
                                {"total", report.total},        {"u", report.u}};
            metrics << line.dump() << "\n";
        }
        if (!out_dir.empty() && cfg.checkpoint_every > 0 && st.iteration % cfg.checkpoint_every == 0)
            save_checkpoint(st, (fs::path(out_dir) / ("checkpoint_" + std::to_string(st.iteration) + ".bin"))
                                    .string());
    }
    if (!out_dir.empty()) save_checkpoint(st, (fs::path(out_dir) / "checkpoint_final.bin").string());
    return st;
}

// Batched variant: per-sample flows with independent gates, mean total loss,
// one optimizer step. The report carries component means; u is the max gate.
template <typename Scalar>
LossReport batch_step(TrainState<Scalar>& state, const std::vector<SegSample<Scalar>>& dataset,
                      const StyleStats<Scalar>& stats) {
    auto& cfg = state.cfg;
    auto& m = state.bundle;
    std::optional<Tensor<Scalar>> total;
    double l_seg = 0, l_mim = 0, l_delta = 0;
    int u_max = 0;
    const std::int64_t iteration = state.iteration;
    for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& s = dataset[state.data_rng.index(dataset.size())];

        std::optional<BlockMask> mask_m;
        std::optional<Tensor<Scalar>> x_m;
        if (cfg.model.use_mim) {
            mask_m = generate_mask(cfg.model.image_h, cfg.model.image_w, cfg.resolve_block(cfg.masked_mask),
                                   cfg.masked_mask.tau_m, state.aug_rng);
            x_m = make_masked_image(s.image, *mask_m, m.prompt);
        }
        const int u = (cfg.use_style && state.aug_rng.bernoulli(cfg.gate_p)) ? 1 : 0;
        std::optional<Tensor<Scalar>> x_s;
        if (u == 1) {
            BlockMask mask_s = generate_mask(cfg.model.image_h, cfg.model.image_w,
                                             cfg.resolve_block(cfg.styled_mask), cfg.styled_mask.tau_m,
                                             state.aug_rng);
            x_s = compose_styled(s.image,
                                 style_transfer(sample_embedding(stats, state.aug_rng), extract_style(s.image),
                                                s.image),
                                 mask_s);
        }
        Tensor<Scalar> ls = seg_loss(seg_forward(s.image, m, u, x_s), s.label);
        Tensor<Scalar> sample_total = ls;
        double lm = 0, ld = 0;
        if (cfg.model.use_mim) {
            Tensor<Scalar> rec_m = mim_forward(*x_m, m);
            Tensor<Scalar> lmim = cfg.mim_masked_only
                                      ? masked_region_loss(rec_m, s.image, mask_m->full, cfg.mim_norm)
                                      : pixel_norm_loss(rec_m, s.image, cfg.mim_norm);
            if (u == 1) {
                Tensor<Scalar> rec_s = mim_forward(*x_s, m);
                lmim = add(lmim, pixel_norm_loss(rec_s, *x_s, cfg.mim_norm));
                Tensor<Scalar> ldl = delta_loss(rec_m, rec_s, cfg.delta_norm);
                ld = static_cast<double>(ldl.item());
                sample_total = add(sample_total, add(lmim, ldl));
            } else {
                sample_total = add(sample_total, lmim);
            }
            lm = static_cast<double>(lmim.item());
        }
        l_seg += static_cast<double>(ls.item());
        l_mim += lm;
        l_delta += ld;
        u_max = std::max(u_max, u);
        total = total ? add(*total, sample_total) : sample_total;
    }
    const double inv = 1.0 / cfg.batch_size;
    Tensor<Scalar> mean_total = scale(*total, static_cast<Scalar>(inv));
    LossReport report = compose_total(u_max, l_seg * inv, l_mim * inv, l_delta * inv);
    if (!std::isfinite(report.total))
        throw TrainingError("non-finite loss at iteration " + std::to_string(iteration) +
                            ": l_seg=" + std::to_string(report.l_seg) + " l_mim=" +
                            std::to_string(report.l_mim) + " l_delta=" + std::to_string(report.l_delta));
    mean_total.backward();
    state.opt.step(m.groups);
    m.zero_grad();
    ++state.iteration;
    state.history.push(report);
    return report;
}

}  // namespace dgseg
