#include "diffret/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <json.hpp>

#include "diffret/parallel.hpp"

using nlohmann::json;

namespace diffret {

std::vector<uint8_t> VisualPrompt::mask() const {
    std::vector<uint8_t> m(static_cast<size_t>(h()) * w(), 0);
    for (int y = 0; y < h(); ++y)
        for (int x = 0; x < w(); ++x)
            if (in_border(y, x)) m[static_cast<size_t>(y) * w() + x] = 1;
    return m;
}

int64_t VisualPrompt::mask_popcount() const {
    int64_t n = 0;
    for (uint8_t b : mask()) n += b;
    return n;
}

void VisualPrompt::zero_interior() {
    for (int y = border_width; y < h() - border_width; ++y)
        for (int x = border_width; x < w() - border_width; ++x) {
            double* p = values.ptr() + (static_cast<int64_t>(y) * w() + x) * 3;
            p[0] = p[1] = p[2] = 0.0;
        }
}

VisualPrompt make_visual_prompt(int h, int w, int border_width) {
    if (border_width < 1) throw ConfigError("visual prompt: border width must be >= 1");
    if (border_width >= std::min(h, w) / 2)
        throw ConfigError("visual prompt: border width " + std::to_string(border_width) +
                          " too large for " + std::to_string(h) + "x" + std::to_string(w));
    VisualPrompt vp;
    vp.values = ad::Tensor({h, w, 3});
    vp.border_width = border_width;
    return vp;
}

PromptSet init_prompts(TaskMode task, int h, int w, int border_width, const Backbone& bb) {
    PromptSet p;
    p.task = task;
    p.visual_sketch = make_visual_prompt(h, w, border_width);
    if (task == TaskMode::Category) p.visual_photo = make_visual_prompt(h, w, border_width);
    p.textual.matrix = bb.embed_text("").matrix;  // start at null-prompt conditioning
    return p;
}

ImageF apply_visual_prompt(const ImageF& image, const VisualPrompt& vp) {
    if (image.h != vp.h() || image.w != vp.w())
        throw ShapeError("apply_visual_prompt: image " + std::to_string(image.h) + "x" +
                         std::to_string(image.w) + " vs prompt " + std::to_string(vp.h()) + "x" +
                         std::to_string(vp.w()));
    ImageF out = image;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += vp.values.data[i];
    return out;
}

double triplet_loss(const std::vector<double>& f_s, const std::vector<double>& f_p,
                    const std::vector<double>& f_n, double mu) {
    if (mu <= 0.0) throw ConfigError("triplet_loss: margin must be positive");
    if (f_s.size() != f_p.size() || f_s.size() != f_n.size())
        throw ShapeError("triplet_loss: dimension mismatch");
    double dp = 0.0, dn = 0.0;
    for (size_t i = 0; i < f_s.size(); ++i) {
        double a = f_s[i] - f_p[i];
        double b = f_s[i] - f_n[i];
        dp += a * a;
        dn += b * b;
    }
    return std::max(0.0, mu + std::sqrt(dp) - std::sqrt(dn));
}

namespace {

struct TripletPools {
    std::vector<const ManifestItem*> anchors;
    std::map<std::string, std::vector<const ManifestItem*>> photos_by_class;
    std::map<std::string, std::vector<const ManifestItem*>> photos_by_instance;
    std::vector<const ManifestItem*> all_photos;
};

TripletPools build_pools(const DatasetManifest& m, TaskMode task) {
    TripletPools p;
    for (const auto& it : m.items) {
        if (it.modality != Modality::Photo) continue;
        p.photos_by_class[it.class_name].push_back(&it);
        if (!it.instance_id.empty()) p.photos_by_instance[it.instance_id].push_back(&it);
        p.all_photos.push_back(&it);
    }
    for (const auto& it : m.items) {
        if (it.modality != Modality::Sketch) continue;
        if (task == TaskMode::Category) {
            p.anchors.push_back(&it);
        } else {
            if (it.instance_id.empty() || !p.photos_by_instance.count(it.instance_id)) continue;
            p.anchors.push_back(&it);
        }
    }
    return p;
}

}  // namespace

TripletBatch sample_triplets(const DatasetManifest& manifest, TaskMode task, int batch_size,
                             Rng& rng) {
    if (batch_size < 1) throw ConfigError("sample_triplets: batch size must be >= 1");
    TripletPools pools = build_pools(manifest, task);
    if (pools.anchors.empty()) throw SamplingError("sample_triplets: no eligible anchor sketches");

    TripletBatch batch;
    for (int i = 0; i < batch_size; ++i) {
        const ManifestItem* a = pools.anchors[static_cast<size_t>(
            rng.uniform_int(static_cast<int>(pools.anchors.size())))];

        const ManifestItem* pos = nullptr;
        const ManifestItem* neg = nullptr;
        if (task == TaskMode::Category) {
            auto it = pools.photos_by_class.find(a->class_name);
            if (it == pools.photos_by_class.end() || it->second.empty())
                throw SamplingError("no positive photo for class " + a->class_name);
            pos = it->second[static_cast<size_t>(rng.uniform_int(static_cast<int>(it->second.size())))];
            std::vector<const ManifestItem*> negs;
            for (const ManifestItem* ph : pools.all_photos)
                if (ph->class_name != a->class_name) negs.push_back(ph);
            if (negs.empty())
                throw SamplingError("no negative photo outside class " + a->class_name);
            neg = negs[static_cast<size_t>(rng.uniform_int(static_cast<int>(negs.size())))];
        } else {
            auto it = pools.photos_by_instance.find(a->instance_id);
            if (it == pools.photos_by_instance.end() || it->second.empty())
                throw SamplingError("no paired photo for instance " + a->instance_id);
            pos = it->second[static_cast<size_t>(rng.uniform_int(static_cast<int>(it->second.size())))];
            std::vector<const ManifestItem*> negs;
            for (const ManifestItem* ph : pools.photos_by_class[a->class_name])
                if (ph->instance_id != a->instance_id) negs.push_back(ph);
            if (negs.empty())
                throw SamplingError("no same-class different-instance negative for class " +
                                    a->class_name);
            neg = negs[static_cast<size_t>(rng.uniform_int(static_cast<int>(negs.size())))];
        }
        batch.anchors.push_back(*a);
        batch.positives.push_back(*pos);
        batch.negatives.push_back(*neg);
    }
    return batch;
}

TextEmbedding class_prompt_embedding(const Backbone& bb, const std::string& text,
                                     bool caption_mode) {
    if (text.empty()) {
        TextEmbedding e = bb.embed_text("");
        e.warning = caption_mode ? "empty caption; using null prompt" : "empty class name; using null prompt";
        return e;
    }
    return bb.embed_text(caption_mode ? text : "a photo of " + text);
}

// --- optimizer ---------------------------------------------------------------

PromptOptimizer::PromptOptimizer(PromptSet& prompts, double lr, double weight_decay)
    : prompts_(&prompts), lr_(lr), wd_(weight_decay) {
    auto init = [](Moments& mo, const ad::Tensor& p) {
        mo.m = ad::Tensor(p.shape);
        mo.v = ad::Tensor(p.shape);
    };
    init(ms_, prompts.visual_sketch.values);
    init(mt_, prompts.textual.matrix);
    auto expand3 = [](const std::vector<uint8_t>& m2) {
        std::vector<uint8_t> m3(m2.size() * 3);
        for (size_t i = 0; i < m2.size(); ++i) m3[3 * i] = m3[3 * i + 1] = m3[3 * i + 2] = m2[i];
        return m3;
    };
    mask_s_ = expand3(prompts.visual_sketch.mask());
    if (prompts.task == TaskMode::Category) {
        init(mp_, prompts.visual_photo->values);
        mask_p_ = expand3(prompts.visual_photo->mask());
    }
}

void PromptOptimizer::step_tensor(ad::Tensor& p, const ad::Tensor& g, Moments& mo,
                                  const std::vector<uint8_t>* mask3) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    for (int64_t i = 0; i < p.numel(); ++i) {
        if (mask3 && !(*mask3)[static_cast<size_t>(i)]) continue;  // frozen interior
        double gi = g.data[i];
        mo.m.data[i] = b1 * mo.m.data[i] + (1.0 - b1) * gi;
        mo.v.data[i] = b2 * mo.v.data[i] + (1.0 - b2) * gi * gi;
        double mhat = mo.m.data[i] / bc1;
        double vhat = mo.v.data[i] / bc2;
        p.data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps) + wd_ * p.data[i]);
    }
}

void PromptOptimizer::apply(const PromptGrads& grads) {
    ++step_count_;
    step_tensor(prompts_->visual_sketch.values, grads.visual_sketch, ms_, &mask_s_);
    if (prompts_->task == TaskMode::Category)
        step_tensor(prompts_->visual_photo->values, grads.visual_photo, mp_, &mask_p_);
    step_tensor(prompts_->textual.matrix, grads.textual, mt_, nullptr);
    prompts_->visual_sketch.zero_interior();
    if (prompts_->task == TaskMode::Category) prompts_->visual_photo->zero_interior();
}

// --- training ----------------------------------------------------------------

namespace {

ad::Tensor prompt_leaf_tensor(const VisualPrompt& vp) {
    ad::Tensor t({1, vp.h(), vp.w(), 3});
    t.data = vp.values.data;
    return t;
}

}  // namespace

TripletGraph build_triplet_graph(ad::Tape& tape, const Backbone& bb, const PromptSet& prompts,
                                 const ImageF& sketch, const ImageF& positive,
                                 const ImageF& negative, const ExtractionConfig& extraction,
                                 double margin, const uint64_t noise_seeds[3]) {
    TripletGraph g;
    g.sketch_prompt = tape.input(prompt_leaf_tensor(prompts.visual_sketch), true);
    g.photo_prompt = prompts.task == TaskMode::Category
                         ? tape.input(prompt_leaf_tensor(*prompts.visual_photo), true)
                         : g.sketch_prompt;
    g.textual = tape.input(prompts.textual.matrix, true);

    auto branch = [&](const ImageF& img, ad::NodeId vp, uint64_t seed) {
        ad::NodeId prompted = tape.add_const(vp, image_tensor(img));
        return extract_graph(tape, bb, prompted, g.textual, extraction, 1, seed);
    };
    ad::NodeId fs = branch(sketch, g.sketch_prompt, noise_seeds[0]);
    ad::NodeId fp = branch(positive, g.photo_prompt, noise_seeds[1]);
    ad::NodeId fn = branch(negative, g.photo_prompt, noise_seeds[2]);

    ad::NodeId dpos = tape.euclidean(fs, fp);
    ad::NodeId dneg = tape.euclidean(fs, fn);
    g.loss = tape.relu(tape.add_scalar(tape.sub(dpos, dneg), margin));
    return g;
}

namespace {

class RecordCache {
public:
    RecordCache(int side) : side_(side) {}

    const ImageF& get(const ManifestItem& item) {
        std::string key = item.path + "#" + to_string(item.modality);
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = cache_.find(key);
            if (it != cache_.end()) return it->second;
        }
        ImageRecord rec = load_and_preprocess(item.path, side_, item.modality);
        std::lock_guard<std::mutex> lock(mu_);
        return cache_.emplace(key, std::move(rec.pixels)).first->second;
    }

private:
    int side_;
    std::mutex mu_;
    std::map<std::string, ImageF> cache_;
};

ad::Tensor strip_batch_grad(const ad::Tensor& g, int h, int w) {
    ad::Tensor out({h, w, 3});
    out.data = g.data;
    return out;
}

void mask_visual_grad(ad::Tensor& g, const VisualPrompt& vp) {
    for (int y = 0; y < vp.h(); ++y)
        for (int x = 0; x < vp.w(); ++x)
            if (!vp.in_border(y, x)) {
                double* p = g.ptr() + (static_cast<int64_t>(y) * vp.w() + x) * 3;
                p[0] = p[1] = p[2] = 0.0;
            }
}

bool all_finite(const ad::Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

TrainResult train_prompts(const DatasetManifest& manifest, TaskMode task, const TrainConfig& cfg,
                          const Backbone& bb) {
    const int side = cfg.image_side > 0 ? cfg.image_side : bb.config().image_side;
    if (cfg.epochs < 1) throw ConfigError("train: epochs must be >= 1");

    ExtractionConfig ext = cfg.extraction;
    ext.task = task;
    if (ext.layer_set.empty()) ext = ExtractionConfig::defaults(task);
    ext.ensemble_size = 1;  // single draw per step; ensembling is inference-only
    ext.validate(bb.config());

    const uint64_t checksum_before = bb.weight_checksum();

    TrainResult result;
    result.prompts = init_prompts(task, side, side, cfg.border_width, bb);
    PromptOptimizer opt(result.prompts, cfg.lr, cfg.weight_decay);

    TripletPools pools = build_pools(manifest, task);
    if (pools.anchors.empty()) throw SamplingError("train: no eligible anchor sketches");
    const int steps_per_epoch =
        std::max<int>(1, static_cast<int>((pools.anchors.size() + cfg.batch_size - 1) /
                                          static_cast<size_t>(cfg.batch_size)));

    RecordCache cache(side);
    Rng sample_rng(cfg.seed);
    std::ofstream log_file;
    if (!cfg.log_path.empty()) log_file.open(cfg.log_path);

    const int vh = result.prompts.visual_sketch.h();
    const int vw = result.prompts.visual_sketch.w();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (int step = 0; step < steps_per_epoch; ++step) {
            TripletBatch batch = sample_triplets(manifest, task, cfg.batch_size, sample_rng);
            const size_t n = batch.size();
            std::vector<PromptGrads> grads(n);
            std::vector<double> losses(n, 0.0);

            parallel_for(
                n,
                [&](size_t i) {
                    uint64_t tag = hash_combine(
                        hash_combine(ext.base_seed, static_cast<uint64_t>(epoch)),
                        static_cast<uint64_t>(step) * 1000003ull + static_cast<uint64_t>(i));
                    uint64_t seeds[3] = {hash_combine(tag, 1), hash_combine(tag, 2),
                                         hash_combine(tag, 3)};
                    ad::Tape tape;
                    TripletGraph tg = build_triplet_graph(
                        tape, bb, result.prompts, cache.get(batch.anchors[i]),
                        cache.get(batch.positives[i]), cache.get(batch.negatives[i]), ext,
                        cfg.margin, seeds);
                    losses[i] = tape.val(tg.loss).data[0];
                    tape.backward(tg.loss);
                    grads[i].visual_sketch = strip_batch_grad(tape.grad_of(tg.sketch_prompt), vh, vw);
                    if (task == TaskMode::Category)
                        grads[i].visual_photo = strip_batch_grad(tape.grad_of(tg.photo_prompt), vh, vw);
                    grads[i].textual = tape.grad_of(tg.textual);
                },
                cfg.threads);

            // deterministic reduction in item order
            PromptGrads total;
            total.visual_sketch = ad::Tensor({vh, vw, 3});
            total.visual_photo = ad::Tensor({vh, vw, 3});
            total.textual = ad::Tensor(result.prompts.textual.matrix.shape);
            double step_loss = 0.0;
            for (size_t i = 0; i < n; ++i) {
                step_loss += losses[i];
                for (int64_t j = 0; j < total.visual_sketch.numel(); ++j)
                    total.visual_sketch.data[j] += grads[i].visual_sketch.data[j];
                if (task == TaskMode::Category)
                    for (int64_t j = 0; j < total.visual_photo.numel(); ++j)
                        total.visual_photo.data[j] += grads[i].visual_photo.data[j];
                for (int64_t j = 0; j < total.textual.numel(); ++j)
                    total.textual.data[j] += grads[i].textual.data[j];
            }
            double inv = 1.0 / static_cast<double>(n);
            step_loss *= inv;
            for (double& v : total.visual_sketch.data) v *= inv;
            for (double& v : total.visual_photo.data) v *= inv;
            for (double& v : total.textual.data) v *= inv;

            if (!std::isfinite(step_loss) || !all_finite(total.visual_sketch) ||
                !all_finite(total.textual) ||
                (task == TaskMode::Category && !all_finite(total.visual_photo))) {
                if (!cfg.snapshot_path.empty()) save_prompts(result.prompts, cfg.snapshot_path);
                throw NumericError("train: non-finite loss or gradient at epoch " +
                                   std::to_string(epoch) + " step " + std::to_string(step) +
                                   (cfg.snapshot_path.empty() ? "" : "; prompt snapshot at " + cfg.snapshot_path));
            }

            mask_visual_grad(total.visual_sketch, result.prompts.visual_sketch);
            if (task == TaskMode::Category)
                mask_visual_grad(total.visual_photo, *result.prompts.visual_photo);
            opt.apply(total);
            epoch_loss += step_loss;
        }

        EpochLog entry{epoch, epoch_loss / steps_per_epoch, cfg.lr};
        result.log.push_back(entry);
        if (log_file)
            log_file << json{{"epoch", entry.epoch}, {"mean_loss", entry.mean_loss}, {"lr", entry.lr}}
                            .dump()
                     << "\n";
    }

    if (bb.weight_checksum() != checksum_before)
        throw NumericError("train: backbone parameters changed during training");
    return result;
}

// --- serialization -----------------------------------------------------------

namespace {

constexpr uint32_t kPromptVersion = 1;

void put_u32(std::string& out, uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_f32(std::string& out, const std::vector<float>& v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

std::string serialize_prompts(const PromptSet& p) {
    std::string out = "DPRM";
    put_u32(out, kPromptVersion);
    out.push_back(p.task == TaskMode::Category ? 0 : 1);
    put_u32(out, static_cast<uint32_t>(p.visual_sketch.h()));
    put_u32(out, static_cast<uint32_t>(p.visual_sketch.w()));
    put_u32(out, static_cast<uint32_t>(p.visual_sketch.border_width));
    put_u32(out, static_cast<uint32_t>(p.textual.matrix.dim(1)));
    put_f32(out, p.visual_sketch.values.to_f32());
    put_f32(out, p.photo_prompt().values.to_f32());
    put_f32(out, p.textual.matrix.to_f32());
    return out;
}

}  // namespace

void save_prompts(const PromptSet& prompts, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write prompt file: " + path);
    std::string bytes = serialize_prompts(prompts);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

PromptSet load_prompts(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read prompt file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 25 || bytes.compare(0, 4, "DPRM") != 0)
        throw DataError("not a DPRM prompt file: " + path);
    size_t off = 4;
    auto get_u32 = [&]() {
        uint32_t v;
        std::memcpy(&v, bytes.data() + off, 4);
        off += 4;
        return v;
    };
    uint32_t version = get_u32();
    if (version != kPromptVersion) throw DataError("unsupported DPRM version");
    uint8_t task_byte = static_cast<uint8_t>(bytes[off++]);
    uint32_t h = get_u32(), w = get_u32(), d = get_u32(), d_emb = get_u32();

    size_t vis_n = static_cast<size_t>(h) * w * 3;
    size_t txt_n = static_cast<size_t>(77) * d_emb;
    if (bytes.size() != off + (2 * vis_n + txt_n) * sizeof(float))
        throw DataError("truncated DPRM prompt file: " + path);
    auto read_f32 = [&](size_t count) {
        std::vector<float> v(count);
        std::memcpy(v.data(), bytes.data() + off, count * sizeof(float));
        off += count * sizeof(float);
        return v;
    };

    PromptSet p;
    p.task = task_byte == 0 ? TaskMode::Category : TaskMode::Finegrained;
    p.visual_sketch.values =
        ad::Tensor::from_f32({static_cast<int>(h), static_cast<int>(w), 3}, read_f32(vis_n));
    p.visual_sketch.border_width = static_cast<int>(d);
    std::vector<float> photo = read_f32(vis_n);
    if (p.task == TaskMode::Category) {
        VisualPrompt vp;
        vp.values = ad::Tensor::from_f32({static_cast<int>(h), static_cast<int>(w), 3}, photo);
        vp.border_width = static_cast<int>(d);
        p.visual_photo = std::move(vp);
    }
    p.textual.matrix = ad::Tensor::from_f32({77, static_cast<int>(d_emb)}, read_f32(txt_n));
    return p;
}

uint64_t prompt_checksum(const PromptSet& prompts) { return fnv1a64(serialize_prompts(prompts)); }

}  // namespace diffret
