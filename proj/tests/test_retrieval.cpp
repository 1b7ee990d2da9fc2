#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <thread>

#include "diffret/data.hpp"
#include "diffret/metrics.hpp"
#include "diffret/retrieval.hpp"
#include "diffret/rng.hpp"

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

// hand-built index with unit-norm rows
GalleryIndex synthetic_index(int n, int d, uint64_t seed) {
    GalleryIndex idx;
    idx.d_feat = d;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "item_%03d", i);
        idx.ids.push_back(buf);
        idx.meta.push_back({"class" + std::to_string(i % 3), "inst" + std::to_string(i)});
        std::vector<double> row(static_cast<size_t>(d));
        double nrm = 0.0;
        for (double& v : row) {
            v = rng.gaussian();
            nrm += v * v;
        }
        nrm = std::sqrt(nrm);
        for (double v : row) idx.features.push_back(static_cast<float>(v / nrm));
    }
    return idx;
}

std::vector<double> random_unit(int d, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(static_cast<size_t>(d));
    double nrm = 0.0;
    for (double& x : v) {
        x = rng.gaussian();
        nrm += x * x;
    }
    nrm = std::sqrt(nrm);
    for (double& x : v) x /= nrm;
    return v;
}

}  // namespace

TEST_CASE("rank_feature equals a brute-force full sort oracle") {
    GalleryIndex idx = synthetic_index(50, 16, 5);
    idx.validate();
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> q = random_unit(16, 100 + static_cast<uint64_t>(trial));
        RetrievalResult res = rank_feature(q, "q", idx, 50);

        // oracle: compute all distances, sort pairs (distance, id)
        std::vector<std::pair<double, std::string>> pairs;
        for (size_t i = 0; i < idx.size(); ++i) {
            double s = 0.0;
            for (int j = 0; j < 16; ++j) {
                double d = q[static_cast<size_t>(j)] - static_cast<double>(idx.row(i)[j]);
                s += d * d;
            }
            pairs.emplace_back(std::sqrt(s), idx.ids[i]);
        }
        std::sort(pairs.begin(), pairs.end());
        REQUIRE(res.ranked_ids.size() == pairs.size());
        for (size_t i = 0; i < pairs.size(); ++i) {
            CHECK(res.ranked_ids[i] == pairs[i].second);
            CHECK(res.distances[i] == pairs[i].first);
        }
        CHECK(std::is_sorted(res.distances.begin(), res.distances.end()));
    }
}

TEST_CASE("equal distances break ties by ascending id") {
    GalleryIndex idx;
    idx.d_feat = 2;
    // three identical rows with ids in scrambled insertion order
    for (const char* id : {"zed", "alpha", "mid"}) {
        idx.ids.push_back(id);
        idx.meta.push_back({"c", ""});
        idx.features.push_back(1.0f);
        idx.features.push_back(0.0f);
    }
    std::vector<double> q = {0.0, 1.0};
    RetrievalResult res = rank_feature(q, "q", idx, 3);
    CHECK(res.ranked_ids == std::vector<std::string>{"alpha", "mid", "zed"});
    CHECK(res.distances[0] == res.distances[1]);
    CHECK(res.distances[1] == res.distances[2]);
}

TEST_CASE("k larger than the gallery returns all items; exact match at distance zero") {
    GalleryIndex idx = synthetic_index(5, 8, 9);
    std::vector<double> q(8);
    for (int j = 0; j < 8; ++j) q[static_cast<size_t>(j)] = static_cast<double>(idx.row(2)[j]);
    RetrievalResult res = rank_feature(q, "q", idx, 100);
    CHECK(res.ranked_ids.size() == 5);
    CHECK(res.ranked_ids[0] == idx.ids[2]);
    CHECK(res.distances[0] == 0.0);
}

TEST_CASE("concurrent queries equal serial execution") {
    GalleryIndex idx = synthetic_index(40, 12, 11);
    std::vector<std::vector<double>> queries;
    for (int i = 0; i < 16; ++i) queries.push_back(random_unit(12, 500 + static_cast<uint64_t>(i)));

    std::vector<RetrievalResult> serial;
    for (const auto& q : queries) serial.push_back(rank_feature(q, "q", idx, 10));

    std::vector<RetrievalResult> parallel(queries.size());
    std::vector<std::thread> pool;
    for (size_t i = 0; i < queries.size(); ++i)
        pool.emplace_back([&, i]() { parallel[i] = rank_feature(queries[i], "q", idx, 10); });
    for (auto& t : pool) t.join();

    for (size_t i = 0; i < queries.size(); ++i) {
        CHECK(parallel[i].ranked_ids == serial[i].ranked_ids);
        CHECK(parallel[i].distances == serial[i].distances);
    }
}

TEST_CASE("stored-feature distances are symmetric and nonnegative") {
    GalleryIndex idx = synthetic_index(12, 10, 13);
    for (size_t a = 0; a < idx.size(); ++a)
        for (size_t b = 0; b < idx.size(); ++b) {
            double ab = 0.0, ba = 0.0;
            for (int j = 0; j < 10; ++j) {
                double d1 = static_cast<double>(idx.row(a)[j]) - idx.row(b)[j];
                double d2 = static_cast<double>(idx.row(b)[j]) - idx.row(a)[j];
                ab += d1 * d1;
                ba += d2 * d2;
            }
            CHECK(std::sqrt(ab) == std::sqrt(ba));
            CHECK(std::sqrt(ab) >= 0.0);
            if (a == b) CHECK(ab == 0.0);
        }
}

TEST_CASE("toy gallery build: norms, ids, determinism, and file round-trip") {
    TempDir dir("diffret_gallery");
    generate_toy_dataset({2, 5, 32, 17}, dir.path.string());
    DatasetManifest m = scan_dataset(dir.path.string(), DatasetLayout::SketchyLike);

    BackboneConfig bb_cfg = BackboneConfig::toy(3);
    bb_cfg.image_side = 32;
    auto bb = Backbone::load(bb_cfg);
    PromptSet prompts = init_prompts(TaskMode::Category, 32, 32, 4, *bb);
    ExtractionConfig ext = ExtractionConfig::defaults(TaskMode::Category);
    ext.ensemble_size = 2;

    std::vector<ManifestItem> photos = m.select(Modality::Photo, {});
    REQUIRE(photos.size() == 10);
    GalleryIndex idx = build_gallery(photos, prompts, ext, *bb);
    idx.validate();  // unique ids + unit rows
    CHECK(idx.size() == 10);
    CHECK(idx.d_feat == feature_dim(bb->config(), TaskMode::Category));

    // rebuild with identical seeds and prompts is bitwise identical
    GalleryIndex idx2 = build_gallery(photos, prompts, ext, *bb);
    CHECK(idx.features == idx2.features);
    CHECK(idx.ids == idx2.ids);
    CHECK(idx.fingerprint == idx2.fingerprint);

    // empty manifest: valid, queryable, returns empty results
    GalleryIndex empty = build_gallery({}, prompts, ext, *bb);
    empty.validate();
    RetrievalResult none = rank_feature(std::vector<double>(static_cast<size_t>(idx.d_feat), 0.0),
                                        "q", empty, 5);
    CHECK(none.ranked_ids.empty());

    // DFEA round-trip
    std::string path = (dir.path / "g.dfea").string();
    save_gallery(idx, path);
    GalleryIndex loaded = load_gallery(path);
    CHECK(loaded.features == idx.features);
    CHECK(loaded.ids == idx.ids);
    CHECK(loaded.fingerprint == idx.fingerprint);
    CHECK(loaded.d_feat == idx.d_feat);
    for (size_t i = 0; i < idx.size(); ++i) {
        CHECK(loaded.meta[i].class_name == idx.meta[i].class_name);
        CHECK(loaded.meta[i].instance_id == idx.meta[i].instance_id);
    }

    // unreadable item lands in the build report, not the index
    std::vector<ManifestItem> with_bad = photos;
    ManifestItem bad = photos[0];
    bad.id = "photo/broken";
    bad.path = (dir.path / "missing.png").string();
    with_bad.push_back(bad);
    BuildReport report;
    GalleryIndex partial = build_gallery(with_bad, prompts, ext, *bb, TextMode::Learned, &report);
    CHECK(partial.size() == 10);
    REQUIRE(report.skipped.size() == 1);
    CHECK(report.skipped[0].find("photo/broken") != std::string::npos);
}

TEST_CASE("queries run the sketch prompt and honor the fingerprint guard") {
    TempDir dir("diffret_query");
    generate_toy_dataset({2, 4, 32, 19}, dir.path.string());
    DatasetManifest m = scan_dataset(dir.path.string(), DatasetLayout::SketchyLike);

    BackboneConfig bb_cfg = BackboneConfig::toy(3);
    bb_cfg.image_side = 32;
    auto bb = Backbone::load(bb_cfg);
    PromptSet prompts = init_prompts(TaskMode::Category, 32, 32, 4, *bb);
    ExtractionConfig ext = ExtractionConfig::defaults(TaskMode::Category);
    ext.ensemble_size = 1;

    GalleryIndex idx = build_gallery(m.select(Modality::Photo, {}), prompts, ext, *bb);
    ManifestItem sketch = m.select(Modality::Sketch, {})[0];
    RetrievalResult res = query(sketch, prompts, ext, *bb, idx, 3);
    CHECK(res.ranked_ids.size() == 3);
    CHECK(res.query_id == sketch.id);

    // same call twice: identical ranking
    RetrievalResult res2 = query(sketch, prompts, ext, *bb, idx, 3);
    CHECK(res.ranked_ids == res2.ranked_ids);
    CHECK(res.distances == res2.distances);

    // recipe drift: timestep change flips the fingerprint
    ExtractionConfig other = ext;
    other.t = 100;
    CHECK_THROWS_AS(query(sketch, prompts, other, *bb, idx, 3), FingerprintError);
    // prompt drift too
    PromptSet other_prompts = init_prompts(TaskMode::Category, 32, 32, 4, *bb);
    other_prompts.textual.matrix.data[0] += 1.0;
    CHECK_THROWS_AS(query(sketch, other_prompts, ext, *bb, idx, 3), FingerprintError);
    // text-mode drift as well
    CHECK_THROWS_AS(query(sketch, prompts, ext, *bb, idx, 3, TextMode::ClassTemplate),
                    FingerprintError);
}
