#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffret/backbone.hpp"
#include "diffret/common.hpp"
#include "diffret/data.hpp"
#include "diffret/features.hpp"
#include "diffret/prompting.hpp"

namespace diffret {

// Flat string key-value config with layered overlays. serialize() emits
// sorted "key = value" lines; parse(serialize(c)) == c.
class KvConfig {
public:
    static KvConfig parse_string(const std::string& text);
    static KvConfig parse_file(const std::string& path);

    std::string serialize() const;
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) != 0; }
    void merge_from(const KvConfig& overlay);  // overlay wins

    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    double get_double(const std::string& key, double fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }
    bool operator==(const KvConfig& o) const { return kv_ == o.kv_; }

private:
    std::map<std::string, std::string> kv_;
};

BackboneConfig backbone_config_from_kv(const KvConfig& kv, const std::string& prefix = "backbone.");
void backbone_config_to_kv(const BackboneConfig& bb, KvConfig& kv,
                           const std::string& prefix = "backbone.");

struct SplitConfig {
    std::string mode = "random";  // random | explicit
    int n_unseen = 2;
    uint64_t seed = 99;
    std::vector<std::string> seen;    // explicit mode
    std::vector<std::string> unseen;  // explicit mode
};

// Full experiment description; resolved typed views over a canonical KvConfig.
struct ExperimentConfig {
    BackboneConfig backbone;
    TaskMode task = TaskMode::Category;
    ExtractionConfig extraction;
    TrainConfig train;
    std::string data_root;
    DatasetLayout layout = DatasetLayout::SketchyLike;
    double data_fraction = 1.0;
    uint64_t fraction_seed = 5;
    SplitConfig split;
    std::vector<std::string> metrics{"mAP@all", "P@200", "Acc@1"};
    int retrieve_k = 200;
    TextMode text_mode = TextMode::Learned;
    std::string out_dir = ".";

    static ExperimentConfig from_kv(const KvConfig& kv);
    KvConfig to_kv() const;
};

// defaults <- (backbone.config file, when referenced) <- config file <- --set pairs
ExperimentConfig load_experiment_config(const std::string& config_path,
                                        const std::vector<std::string>& set_pairs);

std::vector<std::string> split_csv(const std::string& s);
std::string join_csv(const std::vector<std::string>& v);

}  // namespace diffret
