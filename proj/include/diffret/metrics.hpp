#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "diffret/config.hpp"
#include "diffret/retrieval.hpp"

namespace diffret {

struct SplitSpec {
    std::set<std::string> seen_classes;
    std::set<std::string> unseen_classes;
};

SplitSpec make_split(const std::set<std::string>& all_classes, int n_unseen, uint64_t seed);
SplitSpec make_split_explicit(const std::vector<std::string>& seen,
                              const std::vector<std::string>& unseen);

enum class RelevanceMode { ClassMatch, InstanceMatch };

// 1 where the ranked gallery item's class (or instance) matches the query's
std::vector<int> relevance_vector(const RetrievalResult& result, const GalleryIndex& index,
                                  const ManifestItem& query, RelevanceMode mode);

// AP@k = (sum of precision@i at relevant i <= k) / min(total_relevant, k)
double average_precision_at_k(const std::vector<int>& rel, int k, int total_relevant);
double precision_at_k(const std::vector<int>& rel, int k);

// fraction of queries whose true instance appears in the top q
double accuracy_at_q(const std::vector<RetrievalResult>& results, const GalleryIndex& index,
                     const std::vector<ManifestItem>& queries, int q);

struct EvalReport {
    std::map<std::string, double> metrics;
    // per-query AP for each requested mAP metric: metric name -> {query_id, ap}
    std::map<std::string, std::vector<std::pair<std::string, double>>> per_query_ap;
    std::map<std::string, std::string> config_snapshot;
};

std::string eval_report_json(const EvalReport& report);

// Runs every query against the index and aggregates the requested metrics
// ("mAP@all", "mAP@200", "P@200", "Acc@1", ...). Hard-fails when any query or
// gallery class is outside unseen_classes.
EvalReport evaluate(const GalleryIndex& index, const std::vector<ManifestItem>& queries,
                    const PromptSet& prompts, const ExtractionConfig& ext, const Backbone& bb,
                    const SplitSpec& split, const std::vector<std::string>& metric_names,
                    TextMode text_mode = TextMode::Learned, unsigned threads = 0);

// per-class uniform subsample of instance pairs, at least one pair per class
DatasetManifest low_data_subsample(const DatasetManifest& manifest, double fraction,
                                   uint64_t seed);

struct ExperimentOutcome {
    PromptSet prompts;
    std::vector<EpochLog> train_log;
    GalleryIndex index;
    EvalReport report;
    SplitSpec split;
};

// full cycle: scan -> split -> (subsample) -> train -> gallery -> evaluate
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

enum class SweepAxis { Timestep, LayerGrid, BorderWidth, EnsembleSize, DataFraction };

SweepAxis sweep_axis_from_string(const std::string& s);
std::string to_string(SweepAxis a);

struct SweepCell {
    std::string value;
    bool ok = false;
    std::string error;
    EvalReport report;
};

struct SweepTable {
    SweepAxis axis = SweepAxis::Timestep;
    std::vector<std::string> metric_names;
    std::vector<SweepCell> cells;

    std::string to_csv() const;
};

// One full train/evaluate cycle per axis value; failed cells carry the error
// and the sweep continues. Writes sweep.csv and sweep.png under cfg.out_dir.
SweepTable run_sweep(SweepAxis axis, const std::vector<std::string>& values,
                     const ExperimentConfig& base, bool write_outputs = true);

}  // namespace diffret
