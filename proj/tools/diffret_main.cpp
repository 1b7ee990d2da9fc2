// diffret: experiment CLI for prompt-tuned diffusion-feature sketch retrieval.
//
// Exit codes: 0 success, 2 usage, 3 fingerprint/config mismatch,
// 4 data integrity, 5 numerical failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "diffret/config.hpp"
#include "diffret/metrics.hpp"
#include "diffret/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace diffret;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> set_pairs;
};

ExperimentConfig load_cfg(const CommonArgs& a) {
    return load_experiment_config(a.config_path, a.set_pairs);
}

SplitSpec resolve_split(const ExperimentConfig& cfg, const DatasetManifest& manifest) {
    if (cfg.split.mode == "explicit") return make_split_explicit(cfg.split.seen, cfg.split.unseen);
    return make_split(manifest.class_names(), cfg.split.n_unseen, cfg.split.seed);
}

std::string default_values(SweepAxis axis) {
    switch (axis) {
        case SweepAxis::Timestep: return "0:900:100";
        case SweepAxis::BorderWidth: return "10,20,30,40,50";
        case SweepAxis::EnsembleSize: return "1:8:1";
        case SweepAxis::DataFraction: return "0.1,0.3,0.5,0.7,1.0";
        default: return "1|1,2|1,2,3|1,2,3,4|4|3,4|2,3,4";
    }
}

std::vector<std::string> parse_values(SweepAxis axis, const std::string& text) {
    std::vector<std::string> out;
    if (axis == SweepAxis::LayerGrid) {
        std::istringstream is(text);
        std::string tok;
        while (std::getline(is, tok, '|'))
            if (!tok.empty()) out.push_back(tok);
        return out;
    }
    if (text.find(':') != std::string::npos) {
        auto p1 = text.find(':');
        auto p2 = text.find(':', p1 + 1);
        if (p2 == std::string::npos) throw ConfigError("range values need start:end:step");
        double start = std::stod(text.substr(0, p1));
        double end = std::stod(text.substr(p1 + 1, p2 - p1 - 1));
        double step = std::stod(text.substr(p2 + 1));
        if (step <= 0) throw ConfigError("range step must be positive");
        for (double v = start; v <= end + 1e-9; v += step) {
            double r = std::round(v);
            if (std::fabs(v - r) < 1e-9)
                out.push_back(std::to_string(static_cast<long long>(r)));
            else
                out.push_back(std::to_string(v));
        }
        return out;
    }
    return split_csv(text);
}

int cmd_gen_toy(int classes, int instances, int side, uint64_t seed, const std::string& out) {
    ToyDatasetSpec spec{classes, instances, side, seed};
    DatasetManifest m = generate_toy_dataset(spec, out);
    int photos = 0, sketches = 0;
    for (const auto& it : m.items) (it.modality == Modality::Photo ? photos : sketches)++;
    std::cout << "wrote " << photos << " photos + " << sketches << " sketches, "
              << m.pairing.size() << " pairs under " << out << "\n";
    return 0;
}

int cmd_train(const CommonArgs& args, std::string out_path, std::string log_path) {
    ExperimentConfig cfg = load_cfg(args);
    auto bb = Backbone::load(cfg.backbone);
    DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.layout);
    SplitSpec split = resolve_split(cfg, manifest);

    DatasetManifest train_manifest;
    for (const auto& it : manifest.items)
        if (split.seen_classes.count(it.class_name)) train_manifest.items.push_back(it);
    train_manifest.rebuild_pairing();
    if (cfg.data_fraction < 1.0)
        train_manifest = low_data_subsample(train_manifest, cfg.data_fraction, cfg.fraction_seed);

    fs::create_directories(cfg.out_dir);
    if (out_path.empty()) out_path = (fs::path(cfg.out_dir) / "prompts.dprm").string();
    if (log_path.empty()) log_path = (fs::path(cfg.out_dir) / "train_log.jsonl").string();

    TrainConfig tc = cfg.train;
    tc.extraction = cfg.extraction;
    tc.log_path = log_path;
    tc.snapshot_path = out_path + ".diag";
    TrainResult result = train_prompts(train_manifest, cfg.task, tc, *bb);
    save_prompts(result.prompts, out_path);

    std::cout << "trained " << to_string(cfg.task) << " prompts for " << cfg.train.epochs
              << " epochs on " << split.seen_classes.size() << " seen classes\n";
    if (!result.log.empty())
        std::cout << "loss " << result.log.front().mean_loss << " -> " << result.log.back().mean_loss
                  << "\n";
    std::cout << "prompts: " << out_path << "\nlog: " << log_path << "\n";
    return 0;
}

int cmd_build_gallery(const CommonArgs& args, const std::string& prompts_path,
                      std::string out_path, const std::string& report_path) {
    ExperimentConfig cfg = load_cfg(args);
    auto bb = Backbone::load(cfg.backbone);
    PromptSet prompts = load_prompts(prompts_path);
    DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.layout);
    SplitSpec split = resolve_split(cfg, manifest);

    ExtractionConfig ext = cfg.extraction;
    ext.task = cfg.task;
    std::vector<ManifestItem> photos = manifest.select(Modality::Photo, split.unseen_classes);
    BuildReport report;
    GalleryIndex index =
        build_gallery(photos, prompts, ext, *bb, cfg.text_mode, &report, cfg.train.threads);
    index.validate();

    fs::create_directories(cfg.out_dir);
    if (out_path.empty()) out_path = (fs::path(cfg.out_dir) / "gallery.dfea").string();
    save_gallery(index, out_path);
    if (!report_path.empty()) {
        std::ofstream rf(report_path);
        rf << report.to_text();
    }
    std::cout << "gallery: " << index.size() << " items, dim " << index.d_feat << ", fingerprint "
              << index.fingerprint << " -> " << out_path << "\n";
    if (!report.skipped.empty())
        std::cout << "skipped " << report.skipped.size() << " unreadable items\n";
    return 0;
}

int cmd_retrieve(const CommonArgs& args, const std::string& prompts_path,
                 const std::string& gallery_path, int k, std::string out_path) {
    ExperimentConfig cfg = load_cfg(args);
    auto bb = Backbone::load(cfg.backbone);
    PromptSet prompts = load_prompts(prompts_path);
    GalleryIndex index = load_gallery(gallery_path);
    DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.layout);
    SplitSpec split = resolve_split(cfg, manifest);
    std::vector<ManifestItem> queries = manifest.select(Modality::Sketch, split.unseen_classes);

    ExtractionConfig ext = cfg.extraction;
    ext.task = cfg.task;
    json out = json::array();
    for (const auto& q : queries) {
        RetrievalResult r = query(q, prompts, ext, *bb, index, k, cfg.text_mode);
        out.push_back(json{{"query_id", r.query_id},
                           {"ranked_ids", r.ranked_ids},
                           {"distances", r.distances}});
    }
    fs::create_directories(cfg.out_dir);
    if (out_path.empty()) out_path = (fs::path(cfg.out_dir) / "results.json").string();
    std::ofstream of(out_path);
    of << out.dump(1) << "\n";
    std::cout << queries.size() << " queries, top-" << k << " -> " << out_path << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& prompts_path,
                 const std::string& gallery_path, std::string out_path) {
    ExperimentConfig cfg = load_cfg(args);
    auto bb = Backbone::load(cfg.backbone);
    PromptSet prompts = load_prompts(prompts_path);
    GalleryIndex index = load_gallery(gallery_path);
    DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.layout);
    SplitSpec split = resolve_split(cfg, manifest);
    std::vector<ManifestItem> queries = manifest.select(Modality::Sketch, split.unseen_classes);

    ExtractionConfig ext = cfg.extraction;
    ext.task = cfg.task;
    EvalReport report = evaluate(index, queries, prompts, ext, *bb, split, cfg.metrics,
                                 cfg.text_mode, cfg.train.threads);
    KvConfig snapshot = cfg.to_kv();
    for (const auto& [key, value] : snapshot.entries()) report.config_snapshot[key] = value;

    fs::create_directories(cfg.out_dir);
    if (out_path.empty()) out_path = (fs::path(cfg.out_dir) / "report.json").string();
    std::ofstream of(out_path);
    of << eval_report_json(report) << "\n";
    for (const auto& [name, value] : report.metrics) std::cout << name << " = " << value << "\n";
    std::cout << "report: " << out_path << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& axis_name, const std::string& values) {
    ExperimentConfig cfg = load_cfg(args);
    SweepAxis axis = sweep_axis_from_string(axis_name);
    std::string value_text = values.empty() ? default_values(axis) : values;
    SweepTable table = run_sweep(axis, parse_values(axis, value_text), cfg, true);
    std::cout << table.to_csv();
    std::cout << "outputs: " << (fs::path(cfg.out_dir) / "sweep.csv").string() << ", "
              << (fs::path(cfg.out_dir) / "sweep.png").string() << "\n";
    return 0;
}

int cmd_pca(const CommonArgs& args, const std::string& input, const std::string& modality,
            const std::string& t_list, const std::string& layers, const std::string& prompts_path) {
    ExperimentConfig cfg = load_cfg(args);
    auto bb = Backbone::load(cfg.backbone);
    Modality mod = modality_from_string(modality);
    ImageRecord rec = load_and_preprocess(input, bb->config().image_side, mod);

    TextEmbedding cond = bb->embed_text("");
    ImageF pixels = rec.pixels;
    if (!prompts_path.empty()) {
        PromptSet prompts = load_prompts(prompts_path);
        const VisualPrompt& vp =
            mod == Modality::Sketch ? prompts.visual_sketch : prompts.photo_prompt();
        pixels = apply_visual_prompt(pixels, vp);
        cond.matrix = prompts.textual.matrix;
    }

    std::vector<int> ts;
    for (const auto& tok : split_csv(t_list.empty() ? std::to_string(cfg.extraction.t) : t_list))
        ts.push_back(std::stoi(tok));
    std::vector<int> ls;
    for (const auto& tok : split_csv(layers)) ls.push_back(std::stoi(tok));

    fs::create_directories(cfg.out_dir);
    LatentImage z0 = encode_to_latent(*bb, pixels);
    for (int t : ts) {
        ad::Tensor eps = gaussian_like(z0.data.shape, cfg.extraction.base_seed);
        LatentImage z_t = forward_noise(z0, t, eps, bb->schedule());
        BackboneFeatures feats = denoise_capture(*bb, z_t, t, cond);
        for (int l : ls) {
            if (l < 1 || l > 4) throw ConfigError("pca: layers must be in 1..4");
            PcaRender render = pca_render(feats.f_u[static_cast<size_t>(l - 1)]);
            std::string name = "pca_t" + std::to_string(t) + "_u" + std::to_string(l) + ".png";
            write_png((fs::path(cfg.out_dir) / name).string(), to_u8(render.rgb));
            std::cout << name << (render.degenerate ? " (degenerate rank " + std::to_string(render.rank) + ")" : "")
                      << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-tuned diffusion features for zero-shot sketch-based image retrieval"};
    app.require_subcommand(1);

    CommonArgs common;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", common.config_path, "experiment config file");
        cmd->add_option("--set", common.set_pairs, "override config keys (key=value)");
    };
    auto add_text_mode = [&](CLI::App* cmd) {
        cmd->add_option_function<std::string>(
               "--text-mode",
               [&](const std::string& v) { common.set_pairs.push_back("text_mode=" + v); },
               "conditioning source: learned | class_template | caption")
            ->check(CLI::IsMember({"learned", "class_template", "caption"}));
    };

    // gen-toy
    int classes = 8, instances = 5, side = 64;
    uint64_t seed = 7;
    std::string out_dir;
    auto* gen = app.add_subcommand("gen-toy", "generate the synthetic shape dataset");
    gen->add_option("--classes", classes, "number of classes")->default_val(8);
    gen->add_option("--instances", instances, "instances per class")->default_val(5);
    gen->add_option("--side", side, "image side in pixels")->default_val(64);
    gen->add_option("--seed", seed, "generator seed")->default_val(7);
    gen->add_option("--out", out_dir, "output directory")->required();

    // train
    std::string prompts_out, log_out;
    auto* train = app.add_subcommand("train", "learn visual + textual prompts");
    add_common(train);
    train->add_option("--out", prompts_out, "prompt file (default <out.dir>/prompts.dprm)");
    train->add_option("--log", log_out, "training log JSONL");

    // build-gallery
    std::string prompts_path, gallery_out, report_out;
    auto* bg = app.add_subcommand("build-gallery", "extract gallery photo features");
    add_common(bg);
    add_text_mode(bg);
    bg->add_option("--prompts", prompts_path, "prompt file")->required();
    bg->add_option("--out", gallery_out, "feature store (default <out.dir>/gallery.dfea)");
    bg->add_option("--report", report_out, "build report text file");

    // retrieve
    std::string gallery_path, results_out;
    int k = 200;
    auto* ret = app.add_subcommand("retrieve", "rank gallery items for each query sketch");
    add_common(ret);
    add_text_mode(ret);
    ret->add_option("--prompts", prompts_path, "prompt file")->required();
    ret->add_option("--gallery", gallery_path, "feature store")->required();
    ret->add_option("--k", k, "results per query")->default_val(200);
    ret->add_option("--out", results_out, "ranked results JSON");

    // evaluate
    std::string report_json;
    auto* ev = app.add_subcommand("evaluate", "compute retrieval metrics on the unseen split");
    add_common(ev);
    add_text_mode(ev);
    ev->add_option("--prompts", prompts_path, "prompt file")->required();
    ev->add_option("--gallery", gallery_path, "feature store")->required();
    ev->add_option("--out", report_json, "evaluation report JSON");

    // sweep
    std::string axis_name, values;
    auto* sw = app.add_subcommand("sweep", "train/evaluate cycles over one axis");
    add_common(sw);
    sw->add_option("--axis", axis_name,
                   "timestep | layer_grid | border_width | ensemble_size | data_fraction")
        ->required();
    sw->add_option("--values", values,
                   "list a,b,c or range start:end:step; layer sets use |; "
                   "defaults to the standard grid of the axis (timestep: 0:900:100)");

    // pca
    std::string pca_input, pca_modality = "photo", pca_t, pca_layers = "1,2,3,4", pca_prompts;
    auto* pca = app.add_subcommand("pca", "render principal components of captured maps");
    add_common(pca);
    pca->add_option("--input", pca_input, "input image (PNG)")->required();
    pca->add_option("--modality", pca_modality, "photo | sketch")->default_val("photo");
    pca->add_option("--t", pca_t, "timesteps, comma separated (default extract.t)");
    pca->add_option("--layers", pca_layers, "upsampling blocks to render")->default_val("1,2,3,4");
    pca->add_option("--prompts", pca_prompts, "apply trained prompts before extraction");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_toy(classes, instances, side, seed, out_dir);
        if (train->parsed()) return cmd_train(common, prompts_out, log_out);
        if (bg->parsed()) return cmd_build_gallery(common, prompts_path, gallery_out, report_out);
        if (ret->parsed()) return cmd_retrieve(common, prompts_path, gallery_path, k, results_out);
        if (ev->parsed()) return cmd_evaluate(common, prompts_path, gallery_path, report_json);
        if (sw->parsed()) return cmd_sweep(common, axis_name, values);
        if (pca->parsed())
            return cmd_pca(common, pca_input, pca_modality, pca_t, pca_layers, pca_prompts);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 3;
    } catch (const FingerprintError& e) {
        std::cerr << "fingerprint mismatch: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 4;
    } catch (const RangeError& e) {
        std::cerr << "range error: " << e.what() << "\n";
        return 4;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 4;
    } catch (const SamplingError& e) {
        std::cerr << "sampling error: " << e.what() << "\n";
        return 4;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
