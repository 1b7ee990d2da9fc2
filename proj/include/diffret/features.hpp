#pragma once

#include <string>
#include <vector>

#include "diffret/backbone.hpp"
#include "diffret/common.hpp"

namespace diffret {

enum class CombineRule { Mean, Concat };

std::string to_string(CombineRule r);
CombineRule combine_from_string(const std::string& s);

struct ExtractionConfig {
    TaskMode task = TaskMode::Category;
    int t = 273;
    std::vector<int> layer_set;  // 1-based upsampling-block indices
    CombineRule combine = CombineRule::Mean;
    int ensemble_size = 6;
    uint64_t base_seed = 17;  // draw k uses base_seed + k
    bool use_down_blocks = false;  // ablation hook: pool downsampling-side maps instead

    static ExtractionConfig defaults(TaskMode task);
    void validate(const BackboneConfig& bb) const;
    std::string serialize() const;
};

struct FeatureVector {
    std::vector<double> values;
    TaskMode task = TaskMode::Category;
    std::vector<int> layer_set;
    int t = 0;
    int ensemble_size = 1;
};

// channelwise max over spatial positions; map is {a,b,c}
std::vector<double> pool_max(const ad::Tensor& map);

// mean: elementwise average (equal lengths); concat: joined in block order
std::vector<double> combine(const std::vector<std::vector<double>>& pooled, CombineRule rule);

// output dimension of an extraction recipe (layer set, source, combine rule)
int extraction_dim(const BackboneConfig& bb, const ExtractionConfig& cfg);

// Builds noising + denoising + pooling + combine + row-normalize + ensemble
// mean onto the tape. image is {1,h,w,3}; returns the {d} feature node.
// Differentiable end-to-end to image pixels and conditioning.
ad::NodeId extract_graph(ad::Tape& tape, const Backbone& bb, ad::NodeId image, ad::NodeId cond,
                         const ExtractionConfig& cfg, int k, uint64_t base_seed);

FeatureVector extract(const Backbone& bb, const ImageF& image, const TextEmbedding& cond,
                      const ExtractionConfig& cfg, uint64_t seed);
// One batched pass over cfg.ensemble_size noised copies, averaged elementwise.
FeatureVector extract_ensembled(const Backbone& bb, const ImageF& image, const TextEmbedding& cond,
                                const ExtractionConfig& cfg, uint64_t base_seed);

std::vector<double> l2_normalized(const std::vector<double>& v);

struct PcaRender {
    ImageF rgb;  // values in [0,1]
    bool degenerate = false;
    int rank = 0;
};

// Per-pixel projection onto the top-3 principal components of the channel
// covariance, each min-max normalized to [0,1]. Missing components (rank < 3)
// are padded with zeros and flagged.
PcaRender pca_render(const ad::Tensor& feature_map);

}  // namespace diffret
