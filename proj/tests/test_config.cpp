#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "diffret/config.hpp"

using namespace diffret;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("kv config round-trips through serialize/parse") {
    KvConfig c;
    c.set("task", "finegrained");
    c.set("train.lr", "0.0001");
    c.set("data.root", "/some/path with spaces");
    c.set("metrics", "mAP@all,P@200");
    KvConfig back = KvConfig::parse_string(c.serialize());
    CHECK(back == c);
    CHECK(KvConfig::parse_string(back.serialize()) == back);
}

TEST_CASE("kv parsing tolerates comments and blank lines, rejects junk") {
    KvConfig c = KvConfig::parse_string("# comment\n\n a = 1 \nb=two words\n");
    CHECK(c.get("a", "") == "1");
    CHECK(c.get("b", "") == "two words");
    CHECK(c.get_int("a", 0) == 1);
    CHECK(c.get("missing", "fallback") == "fallback");
    CHECK_THROWS_AS(KvConfig::parse_string("no equals sign here"), ConfigError);
    CHECK_THROWS_AS(KvConfig::parse_string("= value"), ConfigError);
    CHECK_THROWS_AS(c.get_int("b", 0), ConfigError);
}

TEST_CASE("experiment config defaults follow the task") {
    KvConfig kv;
    kv.set("task", "category");
    ExperimentConfig cat = ExperimentConfig::from_kv(kv);
    CHECK(cat.extraction.layer_set == std::vector<int>{1, 2});
    CHECK(cat.extraction.combine == CombineRule::Mean);
    CHECK(cat.extraction.t == 273);
    CHECK(cat.extraction.ensemble_size == 6);
    CHECK(cat.train.lr == 1e-4);
    CHECK(cat.train.weight_decay == 0.09);
    CHECK(cat.train.batch_size == 64);
    CHECK(cat.train.epochs == 100);
    CHECK(cat.train.border_width == 16);
    CHECK(cat.retrieve_k == 200);
    CHECK(cat.backbone.total_steps == 1000);
    CHECK(cat.backbone.schedule == "linear");

    kv.set("task", "finegrained");
    ExperimentConfig fg = ExperimentConfig::from_kv(kv);
    CHECK(fg.extraction.layer_set == std::vector<int>{3, 4});
    CHECK(fg.extraction.combine == CombineRule::Concat);
}

TEST_CASE("experiment config stabilizes under to_kv/from_kv") {
    KvConfig kv;
    kv.set("task", "finegrained");
    kv.set("extract.t", "150");
    kv.set("extract.layers", "2,3");
    kv.set("extract.combine", "concat");
    kv.set("train.epochs", "7");
    kv.set("data.root", "/data");
    kv.set("split.mode", "explicit");
    kv.set("split.seen", "a,b");
    kv.set("split.unseen", "c");
    kv.set("text_mode", "class_template");

    ExperimentConfig c1 = ExperimentConfig::from_kv(kv);
    KvConfig canon = c1.to_kv();
    ExperimentConfig c2 = ExperimentConfig::from_kv(canon);
    CHECK(c2.to_kv() == canon);  // fixpoint after one canonicalization
    CHECK(c2.extraction.t == 150);
    CHECK(c2.extraction.layer_set == std::vector<int>{2, 3});
    CHECK(c2.split.seen == std::vector<std::string>{"a", "b"});
    CHECK(to_string(c2.text_mode) == "class_template");
}

TEST_CASE("layering: backbone file under experiment file under --set") {
    TempDir dir("diffret_cfg_layers");
    {
        std::ofstream bb(dir.path / "backbone.cfg");
        bb << "model_id = toy\nimage_side = 96\nseed = 777\n";
    }
    {
        std::ofstream exp(dir.path / "exp.cfg");
        exp << "backbone.config = " << (dir.path / "backbone.cfg").string() << "\n";
        exp << "backbone.image_side = 64\n";  // overrides the backbone file
        exp << "task = category\n";
        exp << "train.epochs = 3\n";
    }
    ExperimentConfig cfg =
        load_experiment_config((dir.path / "exp.cfg").string(), {"train.epochs=9"});
    CHECK(cfg.backbone.seed == 777);        // from the backbone file
    CHECK(cfg.backbone.image_side == 64);   // experiment file wins
    CHECK(cfg.train.epochs == 9);           // --set wins over everything
    CHECK(cfg.backbone.model_id == "toy");

    CHECK_THROWS_AS(load_experiment_config((dir.path / "exp.cfg").string(), {"broken-pair"}),
                    ConfigError);
    CHECK_THROWS_AS(load_experiment_config((dir.path / "nope.cfg").string(), {}), ConfigError);
}

TEST_CASE("invalid enum values are config errors") {
    KvConfig kv;
    kv.set("task", "both");
    CHECK_THROWS_AS(ExperimentConfig::from_kv(kv), ConfigError);
    kv.set("task", "category");
    kv.set("data.layout", "weird");
    CHECK_THROWS_AS(ExperimentConfig::from_kv(kv), ConfigError);
    kv.set("data.layout", "sketchy_like");
    kv.set("text_mode", "oracle");
    CHECK_THROWS_AS(ExperimentConfig::from_kv(kv), ConfigError);
    kv.set("text_mode", "caption");
    kv.set("extract.combine", "sum");
    CHECK_THROWS_AS(ExperimentConfig::from_kv(kv), ConfigError);
}

TEST_CASE("backbone config serialization is stable and validated") {
    BackboneConfig bb = BackboneConfig::toy(42);
    KvConfig kv;
    backbone_config_to_kv(bb, kv);
    BackboneConfig back = backbone_config_from_kv(kv);
    CHECK(back.serialize() == bb.serialize());

    BackboneConfig bad = bb;
    bad.width_scale = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = bb;
    bad.image_side = 40;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
