#include "diffret/config.hpp"

#include <fstream>
#include <sstream>

namespace diffret {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

std::string join_csv(const std::vector<std::string>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += v[i];
    }
    return out;
}

KvConfig KvConfig::parse_string(const std::string& text) {
    KvConfig c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        c.kv_[key] = value;
    }
    return c;
}

KvConfig KvConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return parse_string(os.str());
}

std::string KvConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
    return os.str();
}

void KvConfig::merge_from(const KvConfig& overlay) {
    for (const auto& [k, v] : overlay.kv_) kv_[k] = v;
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int KvConfig::get_int(const std::string& key, int fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoi(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: " + it->second);
    }
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + it->second);
    }
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    try {
        return std::stoull(it->second);
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an unsigned integer: " + it->second);
    }
}

BackboneConfig backbone_config_from_kv(const KvConfig& kv, const std::string& prefix) {
    BackboneConfig bb;
    bb.model_id = kv.get(prefix + "model_id", bb.model_id);
    bb.total_steps = kv.get_int(prefix + "T", bb.total_steps);
    bb.schedule = kv.get(prefix + "schedule", bb.schedule);
    bb.beta_start = kv.get_double(prefix + "beta_start", bb.beta_start);
    bb.beta_end = kv.get_double(prefix + "beta_end", bb.beta_end);
    bb.d_emb = kv.get_int(prefix + "d_emb", bb.d_emb);
    bb.latent_channels = kv.get_int(prefix + "latent_channels", bb.latent_channels);
    bb.image_side = kv.get_int(prefix + "image_side", bb.image_side);
    bb.seed = kv.get_u64(prefix + "seed", bb.seed);
    bb.width_scale = kv.get_int(prefix + "width_scale", bb.width_scale);
    return bb;
}

void backbone_config_to_kv(const BackboneConfig& bb, KvConfig& kv, const std::string& prefix) {
    kv.set(prefix + "model_id", bb.model_id);
    kv.set(prefix + "T", std::to_string(bb.total_steps));
    kv.set(prefix + "schedule", bb.schedule);
    kv.set(prefix + "beta_start", std::to_string(bb.beta_start));
    kv.set(prefix + "beta_end", std::to_string(bb.beta_end));
    kv.set(prefix + "d_emb", std::to_string(bb.d_emb));
    kv.set(prefix + "latent_channels", std::to_string(bb.latent_channels));
    kv.set(prefix + "image_side", std::to_string(bb.image_side));
    kv.set(prefix + "seed", std::to_string(bb.seed));
    kv.set(prefix + "width_scale", std::to_string(bb.width_scale));
}

ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
    ExperimentConfig c;
    c.backbone = backbone_config_from_kv(kv);
    c.task = task_from_string(kv.get("task", "category"));

    c.extraction = ExtractionConfig::defaults(c.task);
    c.extraction.t = kv.get_int("extract.t", c.extraction.t);
    if (kv.has("extract.layers")) {
        c.extraction.layer_set.clear();
        for (const auto& tok : split_csv(kv.get("extract.layers", "")))
            c.extraction.layer_set.push_back(std::stoi(tok));
    }
    if (kv.has("extract.combine"))
        c.extraction.combine = combine_from_string(kv.get("extract.combine", "mean"));
    c.extraction.ensemble_size = kv.get_int("extract.ensemble", c.extraction.ensemble_size);
    c.extraction.base_seed = kv.get_u64("extract.seed", c.extraction.base_seed);
    c.extraction.use_down_blocks = kv.get("extract.source", "up") == "down";

    c.train.lr = kv.get_double("train.lr", c.train.lr);
    c.train.weight_decay = kv.get_double("train.weight_decay", c.train.weight_decay);
    c.train.batch_size = kv.get_int("train.batch", c.train.batch_size);
    c.train.epochs = kv.get_int("train.epochs", c.train.epochs);
    c.train.margin = kv.get_double("train.margin", c.train.margin);
    c.train.border_width = kv.get_int("train.border", c.train.border_width);
    c.train.image_side = kv.get_int("train.image_side", 0);
    c.train.seed = kv.get_u64("train.seed", c.train.seed);
    c.train.threads = static_cast<unsigned>(kv.get_int("train.threads", 0));
    c.train.extraction = c.extraction;

    c.data_root = kv.get("data.root", "");
    c.layout = layout_from_string(kv.get("data.layout", "sketchy_like"));
    c.data_fraction = kv.get_double("data.fraction", 1.0);
    c.fraction_seed = kv.get_u64("data.fraction_seed", 5);

    c.split.mode = kv.get("split.mode", "random");
    c.split.n_unseen = kv.get_int("split.n_unseen", 2);
    c.split.seed = kv.get_u64("split.seed", 99);
    c.split.seen = split_csv(kv.get("split.seen", ""));
    c.split.unseen = split_csv(kv.get("split.unseen", ""));

    if (kv.has("metrics")) c.metrics = split_csv(kv.get("metrics", ""));
    c.retrieve_k = kv.get_int("retrieve.k", 200);
    c.text_mode = text_mode_from_string(kv.get("text_mode", "learned"));
    c.out_dir = kv.get("out.dir", ".");
    return c;
}

KvConfig ExperimentConfig::to_kv() const {
    KvConfig kv;
    backbone_config_to_kv(backbone, kv);
    kv.set("task", to_string(task));
    kv.set("extract.t", std::to_string(extraction.t));
    std::vector<std::string> layers;
    for (int l : extraction.layer_set) layers.push_back(std::to_string(l));
    kv.set("extract.layers", join_csv(layers));
    kv.set("extract.combine", to_string(extraction.combine));
    kv.set("extract.ensemble", std::to_string(extraction.ensemble_size));
    kv.set("extract.seed", std::to_string(extraction.base_seed));
    kv.set("extract.source", extraction.use_down_blocks ? "down" : "up");
    kv.set("train.lr", std::to_string(train.lr));
    kv.set("train.weight_decay", std::to_string(train.weight_decay));
    kv.set("train.batch", std::to_string(train.batch_size));
    kv.set("train.epochs", std::to_string(train.epochs));
    kv.set("train.margin", std::to_string(train.margin));
    kv.set("train.border", std::to_string(train.border_width));
    kv.set("train.image_side", std::to_string(train.image_side));
    kv.set("train.seed", std::to_string(train.seed));
    kv.set("train.threads", std::to_string(train.threads));
    kv.set("data.root", data_root);
    kv.set("data.layout", to_string(layout));
    kv.set("data.fraction", std::to_string(data_fraction));
    kv.set("data.fraction_seed", std::to_string(fraction_seed));
    kv.set("split.mode", split.mode);
    kv.set("split.n_unseen", std::to_string(split.n_unseen));
    kv.set("split.seed", std::to_string(split.seed));
    kv.set("split.seen", join_csv(split.seen));
    kv.set("split.unseen", join_csv(split.unseen));
    kv.set("metrics", join_csv(metrics));
    kv.set("retrieve.k", std::to_string(retrieve_k));
    kv.set("text_mode", to_string(text_mode));
    kv.set("out.dir", out_dir);
    return kv;
}

ExperimentConfig load_experiment_config(const std::string& config_path,
                                        const std::vector<std::string>& set_pairs) {
    KvConfig file_kv;
    if (!config_path.empty()) file_kv = KvConfig::parse_file(config_path);

    KvConfig merged;
    // backbone file layer sits below the experiment file
    std::string bb_path = file_kv.get("backbone.config", "");
    if (!bb_path.empty()) {
        KvConfig bb_kv = KvConfig::parse_file(bb_path);
        for (const auto& [k, v] : bb_kv.entries()) merged.set("backbone." + k, v);
    }
    merged.merge_from(file_kv);

    KvConfig overrides;
    for (const auto& pair : set_pairs) {
        auto eq = pair.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + pair);
        overrides.set(pair.substr(0, eq), pair.substr(eq + 1));
    }
    merged.merge_from(overrides);
    return ExperimentConfig::from_kv(merged);
}

}  // namespace diffret
