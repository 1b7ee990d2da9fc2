#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "diffret/backbone.hpp"
#include "diffret/data.hpp"
#include "diffret/prompting.hpp"
#include "diffret/rng.hpp"

using namespace diffret;
namespace fs = std::filesystem;

namespace {

ImageF random_image(int h, int w, uint64_t seed) {
    ImageF img(h, w);
    Rng rng(seed);
    for (double& v : img.v) v = rng.uniform(-1.0, 1.0);
    return img;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("prompt initialization: zero visual, null-text conditioning") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    PromptSet p = init_prompts(TaskMode::Category, 64, 64, 8, *bb);
    ImageF img = random_image(64, 64, 1);
    ImageF out = apply_visual_prompt(img, p.visual_sketch);
    CHECK(out.v == img.v);  // zero init leaves the image unchanged
    CHECK(p.textual.matrix.data == bb->embed_text("").matrix.data);
    CHECK(p.visual_photo.has_value());

    PromptSet fg = init_prompts(TaskMode::Finegrained, 64, 64, 8, *bb);
    CHECK_FALSE(fg.visual_photo.has_value());
    CHECK(&fg.photo_prompt() == &fg.visual_sketch);  // shared prompt
}

TEST_CASE("trainable count follows the border formula") {
    auto count = [](int h, int w, int d) { return 2 * 3 * d * (h + w - 2 * d); };
    for (auto [h, w, d] : {std::tuple{224, 224, 16}, {256, 256, 10}, {64, 64, 5}}) {
        VisualPrompt vp = make_visual_prompt(h, w, d);
        CHECK(vp.trainable_count() == count(h, w, d));
        CHECK(vp.trainable_count() == vp.mask_popcount() * 3);
    }
    CHECK(make_visual_prompt(224, 224, 16).trainable_count() == 39936);
    CHECK_THROWS_AS(make_visual_prompt(64, 64, 0), ConfigError);
    CHECK_THROWS_AS(make_visual_prompt(64, 64, 32), ConfigError);
}

TEST_CASE("apply_visual_prompt adds on the border and never touches the interior") {
    VisualPrompt vp = make_visual_prompt(32, 32, 4);
    Rng rng(5);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (vp.in_border(y, x))
                for (int c = 0; c < 3; ++c)
                    vp.values.data[(static_cast<size_t>(y) * 32 + x) * 3 + c] = rng.gaussian();
    ImageF img = random_image(32, 32, 6);
    ImageF out = apply_visual_prompt(img, vp);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                size_t i = (static_cast<size_t>(y) * 32 + x) * 3 + c;
                CHECK(out.v[i] == img.v[i] + vp.values.data[i]);  // elementwise oracle
                if (!vp.in_border(y, x)) CHECK(out.v[i] == img.v[i]);
            }
    ImageF small(16, 16);
    CHECK_THROWS_AS(apply_visual_prompt(small, vp), ShapeError);
}

TEST_CASE("triplet loss against the direct formula") {
    Rng rng(11);
    std::vector<double> s(960), p(960), n(960);
    for (auto* v : {&s, &p, &n})
        for (double& x : *v) x = rng.gaussian();
    double got = triplet_loss(s, p, n, 0.2);
    double dp = 0.0, dn = 0.0;
    for (size_t i = 0; i < s.size(); ++i) {
        dp += (s[i] - p[i]) * (s[i] - p[i]);
        dn += (s[i] - n[i]) * (s[i] - n[i]);
    }
    double expected = std::max(0.0, 0.2 + std::sqrt(dp) - std::sqrt(dn));
    CHECK(std::fabs(got - expected) < 1e-7);

    CHECK(triplet_loss(s, s, p, 0.5) == doctest::Approx(0.0));  // d(s,p)=0, d(s,n) >= mu
    CHECK(triplet_loss(s, p, p, 0.3) == doctest::Approx(0.3));  // identical pos/neg cancel
    CHECK(got >= 0.0);
    std::vector<double> shorter(10);
    CHECK_THROWS_AS(triplet_loss(s, p, shorter, 0.2), ShapeError);
    CHECK_THROWS_AS(triplet_loss(s, p, n, 0.0), ConfigError);
}

TEST_CASE("normalized-input loss is invariant to pre-normalization scale") {
    Rng rng(13);
    std::vector<double> s(60), p(60), n(60);
    for (auto* v : {&s, &p, &n})
        for (double& x : *v) x = rng.gaussian();
    auto norm = [](std::vector<double> v) {
        double t = 0.0;
        for (double x : v) t += x * x;
        for (double& x : v) x /= std::sqrt(t);
        return v;
    };
    double base = triplet_loss(norm(s), norm(p), norm(n), 0.2);
    auto scale = [](std::vector<double> v, double a) {
        for (double& x : v) x *= a;
        return v;
    };
    double scaled = triplet_loss(norm(scale(s, 37.0)), norm(scale(p, 0.01)), norm(scale(n, 5.0)), 0.2);
    CHECK(std::fabs(base - scaled) < 1e-12);
}

TEST_CASE("sampling respects category and finegrained constraints") {
    DatasetManifest m;
    // 2 classes, 1 pair each -> category triplet forced
    m.items.push_back({"s/a/0_1", Modality::Sketch, "a", "a_0", "", ""});
    m.items.push_back({"p/a/0", Modality::Photo, "a", "a_0", "", ""});
    m.items.push_back({"s/b/0_1", Modality::Sketch, "b", "b_0", "", ""});
    m.items.push_back({"p/b/0", Modality::Photo, "b", "b_0", "", ""});
    m.rebuild_pairing();

    Rng rng(3);
    TripletBatch b = sample_triplets(m, TaskMode::Category, 8, rng);
    for (size_t i = 0; i < b.size(); ++i) {
        CHECK(b.anchors[i].class_name == b.positives[i].class_name);
        CHECK(b.anchors[i].class_name != b.negatives[i].class_name);
        if (b.anchors[i].class_name == "a") {
            CHECK(b.positives[i].id == "p/a/0");
            CHECK(b.negatives[i].id == "p/b/0");  // the only valid triplet
        }
    }

    // single class in category mode: no negative exists
    DatasetManifest single;
    single.items.push_back({"s1", Modality::Sketch, "a", "a_0", "", ""});
    single.items.push_back({"p1", Modality::Photo, "a", "a_0", "", ""});
    single.rebuild_pairing();
    Rng rng2(4);
    CHECK_THROWS_AS(sample_triplets(single, TaskMode::Category, 1, rng2), SamplingError);
}

TEST_CASE("finegrained sampling never violates the hard-triplet constraints") {
    DatasetManifest m;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i) {
            std::string cls = "c" + std::to_string(c);
            std::string inst = cls + "_" + std::to_string(i);
            m.items.push_back({"s/" + inst, Modality::Sketch, cls, inst, "", ""});
            m.items.push_back({"p/" + inst, Modality::Photo, cls, inst, "", ""});
        }
    m.rebuild_pairing();

    Rng rng(7);
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        TripletBatch b = sample_triplets(m, TaskMode::Finegrained, 10, rng);
        for (size_t i = 0; i < b.size(); ++i) {
            if (b.negatives[i].class_name != b.anchors[i].class_name) ++violations;
            if (b.negatives[i].instance_id == b.anchors[i].instance_id) ++violations;
            if (b.positives[i].instance_id != b.anchors[i].instance_id) ++violations;
        }
    }
    CHECK(violations == 0);

    // a class with a single instance cannot provide a negative
    DatasetManifest lone;
    lone.items.push_back({"s/x", Modality::Sketch, "c", "c_0", "", ""});
    lone.items.push_back({"p/x", Modality::Photo, "c", "c_0", "", ""});
    lone.rebuild_pairing();
    Rng rng3(9);
    CHECK_THROWS_AS(sample_triplets(lone, TaskMode::Finegrained, 1, rng3), SamplingError);
}

TEST_CASE("class and caption conditioning") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    TextEmbedding via_class = class_prompt_embedding(*bb, "cat");
    CHECK(via_class.matrix.data == bb->embed_text("a photo of cat").matrix.data);
    TextEmbedding twice = class_prompt_embedding(*bb, "cat");
    CHECK(via_class.matrix.data == twice.matrix.data);

    TextEmbedding via_caption = class_prompt_embedding(*bb, "a cat sitting on a mat", true);
    CHECK(via_caption.matrix.data == bb->embed_text("a cat sitting on a mat").matrix.data);

    TextEmbedding empty = class_prompt_embedding(*bb, "");
    CHECK(empty.matrix.data == bb->embed_text("").matrix.data);
    CHECK_FALSE(empty.warning.empty());
}

TEST_CASE("optimizer keeps the interior exactly zero through random steps") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    PromptSet p = init_prompts(TaskMode::Category, 48, 48, 6, *bb);
    PromptOptimizer opt(p, 1e-2, 0.09);
    Rng rng(17);
    for (int step = 0; step < 40; ++step) {
        PromptGrads g;
        g.visual_sketch = gaussian_like({48, 48, 3}, 100 + static_cast<uint64_t>(step));
        g.visual_photo = gaussian_like({48, 48, 3}, 200 + static_cast<uint64_t>(step));
        g.textual = gaussian_like(p.textual.matrix.shape, 300 + static_cast<uint64_t>(step));
        opt.apply(g);
    }
    for (const VisualPrompt* vp : {&p.visual_sketch, &*p.visual_photo}) {
        bool border_moved = false;
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 48; ++x)
                for (int c = 0; c < 3; ++c) {
                    double v = vp->values.data[(static_cast<size_t>(y) * 48 + x) * 3 + c];
                    if (vp->in_border(y, x)) {
                        if (v != 0.0) border_moved = true;
                    } else {
                        CHECK(v == 0.0);
                    }
                }
        CHECK(border_moved);
    }
}

TEST_CASE("prompt file round-trip preserves task, dims and values") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    TempDir dir("diffret_dprm");

    PromptSet p = init_prompts(TaskMode::Category, 32, 32, 4, *bb);
    Rng rng(23);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            if (p.visual_sketch.in_border(y, x))
                for (int c = 0; c < 3; ++c) {
                    p.visual_sketch.values.data[(static_cast<size_t>(y) * 32 + x) * 3 + c] = rng.gaussian();
                    p.visual_photo->values.data[(static_cast<size_t>(y) * 32 + x) * 3 + c] = rng.gaussian();
                }
    std::string path = (dir.path / "p.dprm").string();
    save_prompts(p, path);
    PromptSet q = load_prompts(path);
    CHECK(q.task == TaskMode::Category);
    CHECK(q.visual_sketch.border_width == 4);
    CHECK(q.visual_sketch.h() == 32);
    CHECK(q.visual_sketch.values.to_f32() == p.visual_sketch.values.to_f32());
    CHECK(q.visual_photo->values.to_f32() == p.visual_photo->values.to_f32());
    CHECK(q.textual.matrix.to_f32() == p.textual.matrix.to_f32());
    CHECK(prompt_checksum(q) == prompt_checksum(load_prompts(path)));

    // finegrained: the file stores the shared prompt twice, load re-aliases
    PromptSet fg = init_prompts(TaskMode::Finegrained, 32, 32, 4, *bb);
    fg.visual_sketch.values.data[5] = 0.0;  // interior anyway
    std::string fg_path = (dir.path / "fg.dprm").string();
    save_prompts(fg, fg_path);
    PromptSet fg2 = load_prompts(fg_path);
    CHECK(fg2.task == TaskMode::Finegrained);
    CHECK_FALSE(fg2.visual_photo.has_value());
    CHECK(&fg2.photo_prompt() == &fg2.visual_sketch);

    CHECK_THROWS_AS(load_prompts((dir.path / "missing.dprm").string()), DataError);
}

TEST_CASE("triplet graph value agrees with the scalar loss on its features") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    PromptSet p = init_prompts(TaskMode::Category, 32, 32, 4, *bb);
    Rng rng(31);
    for (int64_t i = 0; i < p.visual_sketch.values.numel(); ++i) {
        p.visual_sketch.values.data[i] = rng.gaussian() * 0.05;
        p.visual_photo->values.data[i] = rng.gaussian() * 0.05;
    }
    p.visual_sketch.zero_interior();
    p.visual_photo->zero_interior();

    ImageF s = random_image(32, 32, 1), pos = random_image(32, 32, 2), neg = random_image(32, 32, 3);
    ExtractionConfig ext = ExtractionConfig::defaults(TaskMode::Category);
    uint64_t seeds[3] = {11, 22, 33};

    ad::Tape tape;
    TripletGraph g = build_triplet_graph(tape, *bb, p, s, pos, neg, ext, 0.4, seeds);
    double graph_loss = tape.val(g.loss).data[0];

    TextEmbedding cond;
    cond.matrix = p.textual.matrix;
    FeatureVector fs = extract(*bb, apply_visual_prompt(s, p.visual_sketch), cond, ext, seeds[0]);
    FeatureVector fp = extract(*bb, apply_visual_prompt(pos, *p.visual_photo), cond, ext, seeds[1]);
    FeatureVector fn = extract(*bb, apply_visual_prompt(neg, *p.visual_photo), cond, ext, seeds[2]);
    double scalar_loss = triplet_loss(fs.values, fp.values, fn.values, 0.4);
    CHECK(std::fabs(graph_loss - scalar_loss) < 1e-9);
}

TEST_CASE("a short training run logs decreasing-capable loss and leaves weights frozen") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    TempDir dir("diffret_train_smoke");
    generate_toy_dataset({2, 3, 32, 13}, dir.path.string());
    DatasetManifest m = scan_dataset(dir.path.string(), DatasetLayout::SketchyLike);

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 3;
    tc.border_width = 4;
    tc.image_side = 32;
    tc.lr = 1e-3;
    tc.log_path = (dir.path / "log.jsonl").string();

    uint64_t before = bb->weight_checksum();
    TrainResult result = train_prompts(m, TaskMode::Category, tc, *bb);
    CHECK(bb->weight_checksum() == before);  // frozen through a full run
    REQUIRE(result.log.size() == 2);
    CHECK(result.log[0].epoch == 0);
    CHECK(result.log[0].lr == 1e-3);
    CHECK(std::isfinite(result.log[1].mean_loss));

    // prompts moved on the border, stayed zero inside
    bool moved = false;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = result.prompts.visual_sketch.values
                               .data[(static_cast<size_t>(y) * 32 + x) * 3 + c];
                if (result.prompts.visual_sketch.in_border(y, x)) {
                    if (v != 0.0) moved = true;
                } else {
                    CHECK(v == 0.0);
                }
            }
    CHECK(moved);
    CHECK(fs::exists(dir.path / "log.jsonl"));

    // textual prompt moved off the null embedding
    CHECK(result.prompts.textual.matrix.data != bb->embed_text("").matrix.data);
}

TEST_CASE("training reproduces bitwise under the same seed") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    TempDir dir("diffret_train_repro");
    generate_toy_dataset({2, 2, 32, 5}, dir.path.string());
    DatasetManifest m = scan_dataset(dir.path.string(), DatasetLayout::SketchyLike);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.border_width = 4;
    tc.image_side = 32;
    TrainResult a = train_prompts(m, TaskMode::Finegrained, tc, *bb);
    TrainResult b = train_prompts(m, TaskMode::Finegrained, tc, *bb);
    CHECK(a.prompts.visual_sketch.values.data == b.prompts.visual_sketch.values.data);
    CHECK(a.prompts.textual.matrix.data == b.prompts.textual.matrix.data);
    CHECK(a.log[0].mean_loss == b.log[0].mean_loss);
}

TEST_CASE("non-finite training aborts with a prompt snapshot") {
    auto bb = Backbone::load(BackboneConfig::toy(3));
    TempDir dir("diffret_train_blowup");
    generate_toy_dataset({2, 2, 32, 5}, dir.path.string());
    DatasetManifest m = scan_dataset(dir.path.string(), DatasetLayout::SketchyLike);

    TrainConfig tc;
    tc.epochs = 16;
    tc.batch_size = 2;
    tc.border_width = 4;
    tc.image_side = 32;
    // decoupled decay compounds the prompt magnitude by ~lr*wd per step, which
    // overflows double within ~15 steps and surfaces as a NaN loss
    tc.lr = 1e20;
    tc.snapshot_path = (dir.path / "diag.dprm").string();
    CHECK_THROWS_AS(train_prompts(m, TaskMode::Category, tc, *bb), NumericError);
    CHECK(fs::exists(tc.snapshot_path));
}
