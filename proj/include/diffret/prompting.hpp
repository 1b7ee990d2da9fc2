#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffret/backbone.hpp"
#include "diffret/common.hpp"
#include "diffret/data.hpp"
#include "diffret/features.hpp"
#include "diffret/rng.hpp"

namespace diffret {

// Trainable pixel-space border perturbation; the interior stays exactly zero
// through every optimizer step.
struct VisualPrompt {
    ad::Tensor values;  // {h,w,3}
    int border_width = 0;

    int h() const { return values.dim(0); }
    int w() const { return values.dim(1); }
    bool in_border(int y, int x) const {
        int d = border_width;
        return y < d || y >= h() - d || x < d || x >= w() - d;
    }
    std::vector<uint8_t> mask() const;     // {h*w}, 1 on the border band
    int64_t mask_popcount() const;
    int64_t trainable_count() const { return mask_popcount() * 3; }
    void zero_interior();
};

VisualPrompt make_visual_prompt(int h, int w, int border_width);

struct TextualPrompt {
    ad::Tensor matrix;  // {77,d_emb}, all entries trainable
};

struct PromptSet {
    TaskMode task = TaskMode::Category;
    VisualPrompt visual_sketch;
    std::optional<VisualPrompt> visual_photo;  // empty when finegrained (shared prompt)
    TextualPrompt textual;

    const VisualPrompt& photo_prompt() const {
        return task == TaskMode::Category ? *visual_photo : visual_sketch;
    }
    VisualPrompt& photo_prompt() {
        return task == TaskMode::Category ? *visual_photo : visual_sketch;
    }
};

// zero visual prompts, textual prompt at the null-prompt embedding
PromptSet init_prompts(TaskMode task, int h, int w, int border_width, const Backbone& bb);

// elementwise sum in normalized pixel space, no clamping
ImageF apply_visual_prompt(const ImageF& image, const VisualPrompt& vp);

// hinge max(0, mu + |s-p| - |s-n|) on the vectors as given
double triplet_loss(const std::vector<double>& f_s, const std::vector<double>& f_p,
                    const std::vector<double>& f_n, double mu);

struct TripletBatch {
    std::vector<ManifestItem> anchors;    // sketches
    std::vector<ManifestItem> positives;  // photos
    std::vector<ManifestItem> negatives;  // photos
    size_t size() const { return anchors.size(); }
};

// category: negative from a different class; finegrained: same class,
// different instance. Uniform over eligible items.
TripletBatch sample_triplets(const DatasetManifest& manifest, TaskMode task, int batch_size,
                             Rng& rng);

TextEmbedding class_prompt_embedding(const Backbone& bb, const std::string& text,
                                     bool caption_mode = false);

struct PromptGrads {
    ad::Tensor visual_sketch;  // {h,w,3}
    ad::Tensor visual_photo;   // unused when task=finegrained
    ad::Tensor textual;        // {77,d_emb}
};

// AdamW over the prompt scalars; visual updates are masked to the border band
// and the interior is re-asserted zero after each step.
class PromptOptimizer {
public:
    PromptOptimizer(PromptSet& prompts, double lr, double weight_decay);
    void apply(const PromptGrads& grads);
    int64_t steps() const { return step_count_; }

private:
    struct Moments {
        ad::Tensor m, v;
    };
    void step_tensor(ad::Tensor& p, const ad::Tensor& g, Moments& mo, const std::vector<uint8_t>* mask3);

    PromptSet* prompts_;
    double lr_, wd_;
    int64_t step_count_ = 0;
    Moments ms_, mp_, mt_;
    std::vector<uint8_t> mask_s_, mask_p_;  // per-scalar masks ({h*w*3})
};

// Per-triplet loss graph through the frozen backbone; leaves are the prompt
// tensors, so grad_of() on them yields the training gradients.
struct TripletGraph {
    ad::NodeId loss = -1;
    ad::NodeId sketch_prompt = -1;
    ad::NodeId photo_prompt = -1;  // == sketch_prompt when the prompt is shared
    ad::NodeId textual = -1;
};

TripletGraph build_triplet_graph(ad::Tape& tape, const Backbone& bb, const PromptSet& prompts,
                                 const ImageF& sketch, const ImageF& positive,
                                 const ImageF& negative, const ExtractionConfig& extraction,
                                 double margin, const uint64_t noise_seeds[3]);

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 0.09;
    int batch_size = 64;
    int epochs = 100;
    double margin = 0.2;
    int border_width = 16;
    int image_side = 0;  // 0 -> backbone config side
    uint64_t seed = 7;
    ExtractionConfig extraction;  // ensemble forced to one draw during training
    unsigned threads = 0;
    std::string log_path;       // JSONL {epoch, mean_loss, lr}; empty = no file
    std::string snapshot_path;  // prompt dump on non-finite loss
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    PromptSet prompts;
    std::vector<EpochLog> log;
};

TrainResult train_prompts(const DatasetManifest& manifest, TaskMode task, const TrainConfig& cfg,
                          const Backbone& bb);

// versioned binary prompt file ("DPRM")
void save_prompts(const PromptSet& prompts, const std::string& path);
PromptSet load_prompts(const std::string& path);
uint64_t prompt_checksum(const PromptSet& prompts);

}  // namespace diffret
