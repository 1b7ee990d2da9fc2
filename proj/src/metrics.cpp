#include "diffret/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "diffret/parallel.hpp"
#include "diffret/plot.hpp"
#include "diffret/rng.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace diffret {

SplitSpec make_split(const std::set<std::string>& all_classes, int n_unseen, uint64_t seed) {
    if (n_unseen < 1 || n_unseen >= static_cast<int>(all_classes.size()))
        throw ConfigError("make_split: n_unseen must be in [1, n_classes)");
    std::vector<std::string> classes(all_classes.begin(), all_classes.end());
    Rng rng(seed);
    for (size_t i = classes.size(); i > 1; --i)
        std::swap(classes[i - 1], classes[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
    SplitSpec s;
    for (size_t i = 0; i < classes.size(); ++i)
        (i < static_cast<size_t>(n_unseen) ? s.unseen_classes : s.seen_classes).insert(classes[i]);
    return s;
}

SplitSpec make_split_explicit(const std::vector<std::string>& seen,
                              const std::vector<std::string>& unseen) {
    SplitSpec s;
    s.seen_classes.insert(seen.begin(), seen.end());
    s.unseen_classes.insert(unseen.begin(), unseen.end());
    for (const auto& c : s.seen_classes)
        if (s.unseen_classes.count(c))
            throw ConfigError("make_split: class '" + c + "' appears in both seen and unseen");
    return s;
}

std::vector<int> relevance_vector(const RetrievalResult& result, const GalleryIndex& index,
                                  const ManifestItem& query, RelevanceMode mode) {
    std::map<std::string, size_t> pos;
    for (size_t i = 0; i < index.size(); ++i) pos[index.ids[i]] = i;
    std::vector<int> rel;
    rel.reserve(result.ranked_ids.size());
    for (const auto& id : result.ranked_ids) {
        auto it = pos.find(id);
        if (it == pos.end()) throw DataError("relevance: unknown gallery id " + id);
        const GalleryMeta& m = index.meta[it->second];
        bool hit = mode == RelevanceMode::ClassMatch ? m.class_name == query.class_name
                                                     : (!query.instance_id.empty() &&
                                                        m.instance_id == query.instance_id);
        rel.push_back(hit ? 1 : 0);
    }
    return rel;
}

double average_precision_at_k(const std::vector<int>& rel, int k, int total_relevant) {
    if (k < 0 || k > static_cast<int>(rel.size()))
        throw RangeError("average_precision_at_k: k out of range");
    if (total_relevant < 0) throw RangeError("average_precision_at_k: negative total_relevant");
    if (total_relevant == 0) return 0.0;
    double sum = 0.0;
    int hits = 0;
    for (int i = 0; i < k; ++i) {
        if (rel[static_cast<size_t>(i)]) {
            ++hits;
            sum += static_cast<double>(hits) / (i + 1);
        }
    }
    return sum / std::min(total_relevant, k);
}

double precision_at_k(const std::vector<int>& rel, int k) {
    if (k <= 0 || k > static_cast<int>(rel.size())) throw RangeError("precision_at_k: k out of range");
    int hits = 0;
    for (int i = 0; i < k; ++i) hits += rel[static_cast<size_t>(i)];
    return static_cast<double>(hits) / k;
}

double accuracy_at_q(const std::vector<RetrievalResult>& results, const GalleryIndex& index,
                     const std::vector<ManifestItem>& queries, int q) {
    if (results.size() != queries.size()) throw DataError("accuracy_at_q: results/queries mismatch");
    if (results.empty()) return 0.0;
    std::map<std::string, size_t> pos;
    for (size_t i = 0; i < index.size(); ++i) pos[index.ids[i]] = i;
    int hits = 0;
    for (size_t i = 0; i < results.size(); ++i) {
        if (queries[i].instance_id.empty())
            throw DataError("accuracy_at_q: query " + queries[i].id + " has no instance pairing");
        int take = std::min<int>(q, static_cast<int>(results[i].ranked_ids.size()));
        for (int j = 0; j < take; ++j) {
            const GalleryMeta& m = index.meta[pos.at(results[i].ranked_ids[static_cast<size_t>(j)])];
            if (m.instance_id == queries[i].instance_id) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

namespace {

struct MetricSpec {
    enum Kind { MeanAP, Precision, Accuracy } kind;
    int k = 0;  // 0 means "all"
    std::string name;
};

MetricSpec parse_metric(const std::string& name) {
    MetricSpec m;
    m.name = name;
    auto at = name.find('@');
    if (at == std::string::npos) throw ConfigError("metric '" + name + "': expected <kind>@<k>");
    std::string kind = name.substr(0, at);
    std::string kstr = name.substr(at + 1);
    if (kind == "mAP")
        m.kind = MetricSpec::MeanAP;
    else if (kind == "P")
        m.kind = MetricSpec::Precision;
    else if (kind == "Acc")
        m.kind = MetricSpec::Accuracy;
    else
        throw ConfigError("metric '" + name + "': unknown kind");
    if (kstr == "all") {
        if (m.kind != MetricSpec::MeanAP) throw ConfigError("metric '" + name + "': @all is mAP-only");
        m.k = 0;
    } else {
        m.k = std::stoi(kstr);
        if (m.k < 1) throw ConfigError("metric '" + name + "': k must be >= 1");
    }
    return m;
}

}  // namespace

EvalReport evaluate(const GalleryIndex& index, const std::vector<ManifestItem>& queries,
                    const PromptSet& prompts, const ExtractionConfig& ext, const Backbone& bb,
                    const SplitSpec& split, const std::vector<std::string>& metric_names,
                    TextMode text_mode, unsigned threads) {
    // zero-shot guard
    std::vector<std::string> offenders;
    for (const auto& q : queries)
        if (!split.unseen_classes.count(q.class_name))
            offenders.push_back("query " + q.id + " (class " + q.class_name + ")");
    for (size_t i = 0; i < index.size(); ++i)
        if (!split.unseen_classes.count(index.meta[i].class_name))
            offenders.push_back("gallery " + index.ids[i] + " (class " + index.meta[i].class_name + ")");
    if (!offenders.empty()) {
        std::string msg = "zero-shot guard: classes outside the unseen split:";
        for (size_t i = 0; i < offenders.size() && i < 8; ++i) msg += "\n  " + offenders[i];
        if (offenders.size() > 8) msg += "\n  ... " + std::to_string(offenders.size() - 8) + " more";
        throw DataError(msg);
    }

    std::vector<MetricSpec> specs;
    for (const auto& n : metric_names) specs.push_back(parse_metric(n));

    uint64_t fp = extraction_fingerprint(ext, bb.config(), text_mode, prompts);
    if (fp != index.fingerprint)
        throw FingerprintError("evaluate: index fingerprint does not match the current recipe");

    // full ranking per query, reused by every metric
    const int side = bb.config().image_side;
    std::vector<RetrievalResult> results(queries.size());
    parallel_for(
        queries.size(),
        [&](size_t i) {
            ImageRecord rec = load_and_preprocess(queries[i].path, side, queries[i].modality);
            std::vector<double> f = item_feature(bb, prompts, ext, text_mode, queries[i], rec.pixels);
            results[i] = rank_feature(f, queries[i].id, index, -1);
        },
        threads);

    // class-relevant totals per class
    std::map<std::string, int> class_totals;
    for (const auto& m : index.meta) class_totals[m.class_name]++;

    EvalReport report;
    const int n_items = static_cast<int>(index.size());
    for (const auto& spec : specs) {
        if (spec.kind == MetricSpec::Accuracy) {
            report.metrics[spec.name] = accuracy_at_q(results, index, queries, spec.k);
            continue;
        }
        int k = spec.k == 0 ? n_items : std::min(spec.k, n_items);
        double acc = 0.0;
        std::vector<std::pair<std::string, double>> per_query;
        for (size_t i = 0; i < queries.size(); ++i) {
            std::vector<int> rel =
                relevance_vector(results[i], index, queries[i], RelevanceMode::ClassMatch);
            if (spec.kind == MetricSpec::Precision) {
                acc += precision_at_k(rel, k);
            } else {
                int total = class_totals.count(queries[i].class_name)
                                ? class_totals[queries[i].class_name]
                                : 0;
                double ap = average_precision_at_k(rel, k, total);
                per_query.emplace_back(queries[i].id, ap);
                acc += ap;
            }
        }
        report.metrics[spec.name] = queries.empty() ? 0.0 : acc / static_cast<double>(queries.size());
        if (spec.kind == MetricSpec::MeanAP) report.per_query_ap[spec.name] = std::move(per_query);
    }
    return report;
}

std::string eval_report_json(const EvalReport& report) {
    json j;
    j["metrics"] = report.metrics;
    json pq = json::object();
    for (const auto& [name, rows] : report.per_query_ap) {
        json arr = json::array();
        for (const auto& [id, ap] : rows) arr.push_back(json{{"query_id", id}, {"ap", ap}});
        pq[name] = std::move(arr);
    }
    j["per_query_ap"] = std::move(pq);
    j["config"] = report.config_snapshot;
    return j.dump(1);
}

DatasetManifest low_data_subsample(const DatasetManifest& manifest, double fraction,
                                   uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ConfigError("low_data_subsample: fraction must be in (0,1]");
    if (fraction == 1.0) return manifest;
    if (manifest.pairing.empty() && !manifest.items.empty())
        throw DataError("low_data_subsample: manifest has no instance pairing to subsample");

    // group instances per class, keep a per-class uniform subsample of pairs
    std::map<std::string, std::vector<std::string>> instances_by_class;
    for (const auto& [inst, pair] : manifest.pairing) {
        if (pair.photo_ids.empty()) continue;
        const ManifestItem* item = manifest.find(pair.photo_ids[0]);
        if (item) instances_by_class[item->class_name].push_back(inst);
    }

    std::set<std::string> kept_instances;
    for (auto& [cls, insts] : instances_by_class) {
        std::sort(insts.begin(), insts.end());
        Rng rng(hash_combine(seed, fnv1a64(cls)));
        for (size_t i = insts.size(); i > 1; --i)
            std::swap(insts[i - 1], insts[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
        size_t keep = std::max<size_t>(1, static_cast<size_t>(std::floor(
                                              fraction * static_cast<double>(insts.size()))));
        for (size_t i = 0; i < keep; ++i) kept_instances.insert(insts[i]);
    }

    DatasetManifest out;
    for (const auto& it : manifest.items) {
        if (it.instance_id.empty()) continue;  // unpaired items are not training pairs
        if (kept_instances.count(it.instance_id)) out.items.push_back(it);
    }
    out.validate();
    out.rebuild_pairing();
    return out;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
    auto bb = Backbone::load(cfg.backbone);
    DatasetManifest manifest = scan_dataset(cfg.data_root, cfg.layout);

    SplitSpec split;
    if (cfg.split.mode == "explicit")
        split = make_split_explicit(cfg.split.seen, cfg.split.unseen);
    else
        split = make_split(manifest.class_names(), cfg.split.n_unseen, cfg.split.seed);

    DatasetManifest train_manifest;
    for (const auto& it : manifest.items)
        if (split.seen_classes.count(it.class_name)) train_manifest.items.push_back(it);
    train_manifest.rebuild_pairing();
    if (cfg.data_fraction < 1.0)
        train_manifest = low_data_subsample(train_manifest, cfg.data_fraction, cfg.fraction_seed);

    TrainConfig tc = cfg.train;
    tc.extraction = cfg.extraction;
    ExperimentOutcome out;
    out.split = split;
    TrainResult tr = train_prompts(train_manifest, cfg.task, tc, *bb);
    out.prompts = std::move(tr.prompts);
    out.train_log = std::move(tr.log);

    std::vector<ManifestItem> gallery_items = manifest.select(Modality::Photo, split.unseen_classes);
    std::vector<ManifestItem> queries = manifest.select(Modality::Sketch, split.unseen_classes);
    ExtractionConfig ext = cfg.extraction;
    ext.task = cfg.task;
    out.index = build_gallery(gallery_items, out.prompts, ext, *bb, cfg.text_mode, nullptr,
                              cfg.train.threads);
    out.report = evaluate(out.index, queries, out.prompts, ext, *bb, split, cfg.metrics,
                          cfg.text_mode, cfg.train.threads);
    KvConfig snapshot = cfg.to_kv();
    for (const auto& [k, v] : snapshot.entries()) out.report.config_snapshot[k] = v;
    return out;
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "timestep") return SweepAxis::Timestep;
    if (s == "layer_grid") return SweepAxis::LayerGrid;
    if (s == "border_width") return SweepAxis::BorderWidth;
    if (s == "ensemble_size") return SweepAxis::EnsembleSize;
    if (s == "data_fraction") return SweepAxis::DataFraction;
    throw ConfigError("unknown sweep axis: " + s);
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::Timestep: return "timestep";
        case SweepAxis::LayerGrid: return "layer_grid";
        case SweepAxis::BorderWidth: return "border_width";
        case SweepAxis::EnsembleSize: return "ensemble_size";
        default: return "data_fraction";
    }
}

std::string SweepTable::to_csv() const {
    std::ostringstream os;
    os << to_string(axis);
    for (const auto& m : metric_names) os << "," << m;
    os << ",status\n";
    for (const auto& c : cells) {
        std::string value = c.value;
        std::replace(value.begin(), value.end(), ',', '+');  // layer sets like 1,2
        os << value;
        for (const auto& m : metric_names) {
            os << ",";
            if (c.ok) {
                auto it = c.report.metrics.find(m);
                if (it != c.report.metrics.end()) os << it->second;
            }
        }
        os << "," << (c.ok ? "ok" : "error: " + c.error) << "\n";
    }
    return os.str();
}

SweepTable run_sweep(SweepAxis axis, const std::vector<std::string>& values,
                     const ExperimentConfig& base, bool write_outputs) {
    SweepTable table;
    table.axis = axis;
    table.metric_names = base.metrics;

    for (const auto& value : values) {
        KvConfig kv = base.to_kv();
        switch (axis) {
            case SweepAxis::Timestep: kv.set("extract.t", value); break;
            case SweepAxis::BorderWidth: kv.set("train.border", value); break;
            case SweepAxis::EnsembleSize: kv.set("extract.ensemble", value); break;
            case SweepAxis::DataFraction: kv.set("data.fraction", value); break;
            case SweepAxis::LayerGrid: {
                kv.set("extract.layers", value);
                // mean stays only when the selected widths agree
                auto widths = base.backbone.up_widths();
                std::vector<std::string> toks = split_csv(value);
                bool equal = true;
                for (const auto& t : toks)
                    equal = equal &&
                            widths[static_cast<size_t>(std::stoi(t) - 1)] ==
                                widths[static_cast<size_t>(std::stoi(toks[0]) - 1)];
                if (base.extraction.combine == CombineRule::Mean && !equal)
                    kv.set("extract.combine", "concat");
                break;
            }
        }
        SweepCell cell;
        cell.value = value;
        try {
            ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
            cell.report = run_experiment(cfg).report;
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.error = e.what();
        }
        table.cells.push_back(std::move(cell));
    }

    if (write_outputs) {
        fs::create_directories(base.out_dir);
        std::ofstream csv(fs::path(base.out_dir) / "sweep.csv");
        csv << table.to_csv();

        std::vector<PlotSeries> series;
        for (const auto& m : table.metric_names) {
            PlotSeries s;
            s.name = m;
            for (size_t i = 0; i < table.cells.size(); ++i) {
                const auto& c = table.cells[i];
                if (!c.ok || !c.report.metrics.count(m)) continue;
                // layer grids are categorical; plot them by cell index
                double x = axis == SweepAxis::LayerGrid ? static_cast<double>(i)
                                                        : std::stod(c.value);
                s.x.push_back(x);
                s.y.push_back(c.report.metrics.at(m));
            }
            if (!s.x.empty()) series.push_back(std::move(s));
        }
        write_line_plot((fs::path(base.out_dir) / "sweep.png").string(),
                        "sweep over " + to_string(axis), to_string(axis), "metric value", series);
    }
    return table;
}

}  // namespace diffret
