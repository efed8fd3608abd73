// dgseg: domain-generalized semantic segmentation at desk scale.
//
// Subcommands: synth (two-domain dataset + style corpus), stats (fit style
// statistics), preprocess (tile + remap + split), train, eval, ablate.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "dgseg/eval.hpp"
#include "dgseg/train.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

dgseg::TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw dgseg::IoError("cannot open config " + path);
    nlohmann::json j;
    f >> j;
    return j.get<dgseg::TrainConfig>();
}

std::vector<dgseg::SegSample<Scalar>> load_dataset_checked(const std::string& dir, int expected_classes) {
    auto data = dgseg::load_dataset_dir<Scalar>(dir);
    auto k = dgseg::dataset_num_classes(dir);
    if (k && *k != expected_classes)
        throw dgseg::ConfigError("dataset " + dir + " declares " + std::to_string(*k) +
                                 " classes, model expects " + std::to_string(expected_classes));
    return data;
}

int cmd_synth(const std::string& out, std::uint64_t seed, int n, int size, int classes, int corpus_n) {
    auto ds = dgseg::synth_two_domain<Scalar>(seed, n, size, classes);
    dgseg::save_dataset_dir(ds.domain_a, classes, (fs::path(out) / "A").string());
    dgseg::save_dataset_dir(ds.domain_b, classes, (fs::path(out) / "B").string());
    auto corpus = dgseg::synth_style_corpus<Scalar>(seed + 1, corpus_n, size, classes);
    fs::create_directories(fs::path(out) / "style_corpus");
    int idx = 0;
    for (const auto& img : corpus) {
        char name[32];
        std::snprintf(name, sizeof name, "%05d.ppm", idx++);
        dgseg::save_image(img, (fs::path(out) / "style_corpus" / name).string());
    }
    std::cout << "wrote " << n << " samples per domain and " << corpus_n << " corpus images under " << out
              << "\n";
    return 0;
}

int cmd_stats(const std::string& corpus, const std::string& out, int max_images) {
    std::vector<fs::path> files;
    const fs::path dir =
        fs::exists(fs::path(corpus) / "images") ? fs::path(corpus) / "images" : fs::path(corpus);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (max_images > 0 && static_cast<int>(files.size()) > max_images) files.resize(max_images);

    std::vector<dgseg::StyleEmbedding<Scalar>> embeddings;
    for (const auto& f : files) embeddings.push_back(dgseg::extract_style(dgseg::load_image<Scalar>(f.string())));
    auto stats = dgseg::fit_style_stats(embeddings);
    dgseg::save_style_stats(stats, out);
    std::cout << "fitted style stats from " << embeddings.size() << " images -> " << out << "\n";
    return 0;
}

int cmd_preprocess(const std::string& root, const std::string& benchmark, const std::string& out,
                   int tile_size, int stride, const std::string& src_mapping,
                   const std::string& tgt_mapping) {
    auto split = dgseg::build_split(root, benchmark);
    for (const auto& w : split.warnings) std::cerr << "warning: " << w << "\n";
    if (stride <= 0) stride = tile_size;

    nlohmann::json manifest;
    manifest["format"] = "dgseg-manifest";
    manifest["version"] = 1;
    manifest["benchmark"] = benchmark;
    manifest["tile"] = tile_size;
    manifest["stride"] = stride;

    auto process = [&](const std::vector<dgseg::SplitEntry>& entries, const std::string& split_name,
                       const std::string& mapping_path) {
        std::optional<dgseg::LabelMapping> mapping;
        if (!mapping_path.empty()) mapping = dgseg::LabelMapping::load(mapping_path);
        const fs::path outdir = fs::path(out) / split_name;
        fs::create_directories(outdir / "images");
        fs::create_directories(outdir / "labels");
        std::map<int, std::int64_t> histogram;
        nlohmann::json checksums = nlohmann::json::object();
        int idx = 0;
        int num_classes = 0;
        for (const auto& e : entries) {
            dgseg::SegSample<Scalar> s;
            s.image = dgseg::load_image<Scalar>(e.image_path);
            s.label = dgseg::load_label(e.label_path);
            s.source_path = e.image_path;
            if (mapping) s.label = dgseg::remap_labels(s.label, *mapping);
            for (const auto& t : dgseg::tile(s, tile_size, stride)) {
                char name[32];
                std::snprintf(name, sizeof name, "%06d", idx++);
                const auto img_path = outdir / "images" / (std::string(name) + ".ppm");
                const auto lbl_path = outdir / "labels" / (std::string(name) + ".pgm");
                dgseg::save_image(t.image, img_path.string());
                dgseg::save_label(t.label, lbl_path.string());
                checksums[std::string(name)] = {
                    {"image", dgseg::fnv1a64_file(img_path.string())},
                    {"label", dgseg::fnv1a64_file(lbl_path.string())}};
                for (int y = 0; y < t.label.rows(); ++y)
                    for (int x = 0; x < t.label.cols(); ++x) ++histogram[t.label(y, x)];
            }
        }
        if (mapping) num_classes = static_cast<int>(mapping->target_classes.size());
        for (const auto& [cls, cnt] : histogram)
            if (cls != dgseg::kIgnoreIndex) num_classes = std::max(num_classes, cls + 1);
        nlohmann::json hist = nlohmann::json::object();
        for (const auto& [cls, cnt] : histogram) hist[std::to_string(cls)] = cnt;
        manifest[split_name] = {{"source_pairs", entries.size()},
                                {"tiles", idx},
                                {"class_histogram", hist},
                                {"checksums", checksums}};
        nlohmann::json meta;
        meta["format"] = "dgseg-dataset";
        meta["version"] = 1;
        meta["num_classes"] = num_classes;
        meta["ignore_index"] = dgseg::kIgnoreIndex;
        meta["count"] = idx;
        auto palette = dgseg::default_palette(num_classes);
        if (mapping)
            for (auto& ci : palette)
                if (ci.id < static_cast<int>(mapping->target_classes.size()))
                    ci.name = mapping->target_classes[static_cast<std::size_t>(ci.id)];
        auto jpal = nlohmann::json::array();
        for (const auto& ci : palette)
            jpal.push_back(
                {{"id", ci.id}, {"name", ci.name}, {"color", {ci.color[0], ci.color[1], ci.color[2]}}});
        meta["palette"] = jpal;
        std::ofstream mf(outdir / "dataset.json");
        mf << meta.dump(2) << "\n";
        return idx;
    };

    const int ntrain = process(split.train, "train", src_mapping);
    const int ntest = process(split.test, "test", tgt_mapping);
    std::ofstream mf(fs::path(out) / "manifest.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "preprocessed " << benchmark << ": " << ntrain << " train tiles, " << ntest
              << " test tiles -> " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& stats_path,
              const std::string& out) {
    auto cfg = load_train_config(config_path);
    auto data = load_dataset_checked(data_dir, cfg.model.num_classes);
    auto stats = dgseg::load_style_stats<Scalar>(stats_path);
    auto st = dgseg::run_training(cfg, data, stats, out);
    std::cout << "trained " << st.iteration << " iterations; final total loss "
              << (st.history.items.empty() ? 0.0 : st.history.items.back().total) << "\n"
              << "checkpoint: " << (fs::path(out) / "checkpoint_final.bin").string() << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& out) {
    auto st = dgseg::load_checkpoint<Scalar>(ckpt_path);
    auto data = load_dataset_checked(data_dir, st.cfg.model.num_classes);
    auto result = dgseg::evaluate(st.bundle, data);
    const std::string table = dgseg::render_iou_table(result.iou, dgseg::dataset_class_names(data_dir));
    std::cout << table;
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream tf(fs::path(out) / "report.txt");
        tf << table;
        nlohmann::json rec = dgseg::iou_record(result.iou);
        rec["checkpoint"] = ckpt_path;
        rec["dataset"] = data_dir;
        rec["samples"] = result.samples;
        std::ofstream jf(fs::path(out) / "report.json");
        jf << rec.dump(2) << "\n";
    }
    return 0;
}

int cmd_ablate(const std::string& base_config, const std::string& data_dir, const std::string& stats_path,
               const std::vector<std::string>& eval_specs, const std::string& rows_path,
               const std::string& out) {
    auto base = load_train_config(base_config);
    auto train_data = load_dataset_checked(data_dir, base.model.num_classes);
    auto stats = dgseg::load_style_stats<Scalar>(stats_path);

    std::vector<std::pair<std::string, std::vector<dgseg::SegSample<Scalar>>>> eval_sets;
    for (const auto& spec : eval_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw dgseg::ConfigError("--eval expects name=dir, got '" + spec + "'");
        eval_sets.emplace_back(spec.substr(0, eq),
                               load_dataset_checked(spec.substr(eq + 1), base.model.num_classes));
    }
    if (eval_sets.empty()) throw dgseg::ConfigError("ablate needs at least one --eval name=dir");

    std::vector<std::pair<std::string, dgseg::TrainConfig>> rows;
    if (rows_path.empty()) {
        rows = dgseg::standard_ablation_rows(base);
    } else {
        std::ifstream rf(rows_path);
        if (!rf) throw dgseg::IoError("cannot open rows file " + rows_path);
        nlohmann::json spec;
        rf >> spec;
        nlohmann::json base_json = base;
        for (const auto& r : spec.at("rows")) {
            nlohmann::json merged = base_json;
            merged.merge_patch(r.value("config", nlohmann::json::object()));
            rows.emplace_back(r.at("name").get<std::string>(), merged.get<dgseg::TrainConfig>());
        }
        if (rows.size() < 2) throw dgseg::ConfigError("rows file must define at least 2 runs");
    }

    if (!out.empty()) fs::create_directories(out);
    std::ofstream runs_log;
    if (!out.empty()) runs_log.open(fs::path(out) / "runs.jsonl");

    std::vector<dgseg::RunLog> logs;
    for (const auto& [name, cfg] : rows) {
        std::cerr << "running " << name << " (" << cfg.iterations << " iterations)\n";
        auto st = dgseg::run_training(cfg, train_data, stats,
                                      out.empty() ? "" : (fs::path(out) / name).string());
        dgseg::RunLog log;
        log.name = name;
        for (const auto& [dom, ds] : eval_sets)
            log.miou_by_domain[dom] = 100.0 * dgseg::evaluate(st.bundle, ds).iou.miou;
        logs.push_back(log);
        if (runs_log.is_open()) {
            nlohmann::json j{{"name", log.name}, {"miou_by_domain", log.miou_by_domain}};
            runs_log << j.dump() << "\n";
            runs_log.flush();
        }
    }

    auto table = dgseg::ablation_report(logs, rows.front().first);
    const std::string text = dgseg::render_ablation_table(table);
    std::cout << text;
    if (!out.empty()) {
        std::ofstream tf(fs::path(out) / "ablation.txt");
        tf << text;
        std::ofstream jf(fs::path(out) / "ablation.json");
        jf << dgseg::ablation_record(table).dump(2) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"domain-generalized semantic segmentation trainer"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate the synthetic two-domain dataset and style corpus");
    std::string synth_out;
    std::uint64_t synth_seed = 2024;
    int synth_n = 256, synth_size = 32, synth_classes = 3, synth_corpus = 64;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--n", synth_n, "samples per domain");
    synth->add_option("--size", synth_size, "image side in pixels");
    synth->add_option("--classes", synth_classes, "number of classes");
    synth->add_option("--corpus-n", synth_corpus, "style corpus size");

    // stats
    auto* stats = app.add_subcommand("stats", "fit style statistics from a corpus directory");
    std::string stats_corpus, stats_out;
    int stats_max = 0;
    stats->add_option("--corpus", stats_corpus, "directory of .ppm images")->required();
    stats->add_option("--out", stats_out, "output stats file")->required();
    stats->add_option("--max", stats_max, "cap the number of corpus images (0 = all)");

    // preprocess
    auto* prep = app.add_subcommand("preprocess", "tile, remap and split a benchmark layout");
    std::string prep_root, prep_bench, prep_out, prep_srcmap, prep_tgtmap;
    int prep_tile = 512, prep_stride = 0;
    prep->add_option("--root", prep_root, "benchmark root directory")->required();
    prep->add_option("--benchmark", prep_bench, "benchmark id, e.g. P(i)2V")->required();
    prep->add_option("--out", prep_out, "output directory")->required();
    prep->add_option("--tile", prep_tile, "tile size");
    prep->add_option("--stride", prep_stride, "tile stride (default: tile size)");
    prep->add_option("--source-mapping", prep_srcmap, "label mapping file for the source domain");
    prep->add_option("--target-mapping", prep_tgtmap, "label mapping file for the target domain");

    // train
    auto* train = app.add_subcommand("train", "train from a config file");
    std::string train_cfg, train_data, train_stats, train_out;
    train->add_option("--config", train_cfg, "train config json")->required();
    train->add_option("--data", train_data, "training dataset directory")->required();
    train->add_option("--stats", train_stats, "style stats file")->required();
    train->add_option("--out", train_out, "run output directory")->required();

    // eval
    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_out;
    evalc->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    evalc->add_option("--data", eval_data, "dataset directory")->required();
    evalc->add_option("--out", eval_out, "report output directory");

    // ablate
    auto* abl = app.add_subcommand("ablate", "run a config matrix and emit a comparison table");
    std::string abl_cfg, abl_data, abl_stats, abl_rows, abl_out;
    std::vector<std::string> abl_eval;
    abl->add_option("--base-config", abl_cfg, "base train config json")->required();
    abl->add_option("--data", abl_data, "training dataset directory")->required();
    abl->add_option("--stats", abl_stats, "style stats file")->required();
    abl->add_option("--eval", abl_eval, "evaluation set as name=dir (repeatable)")->required();
    abl->add_option("--rows", abl_rows, "rows file (default: the standard 16-row matrix)");
    abl->add_option("--out", abl_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) return cmd_synth(synth_out, synth_seed, synth_n, synth_size, synth_classes, synth_corpus);
        if (*stats) return cmd_stats(stats_corpus, stats_out, stats_max);
        if (*prep)
            return cmd_preprocess(prep_root, prep_bench, prep_out, prep_tile, prep_stride, prep_srcmap,
                                  prep_tgtmap);
        if (*train) return cmd_train(train_cfg, train_data, train_stats, train_out);
        if (*evalc) return cmd_eval(eval_ckpt, eval_data, eval_out);
        if (*abl) return cmd_ablate(abl_cfg, abl_data, abl_stats, abl_eval, abl_rows, abl_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
