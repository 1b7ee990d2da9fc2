#pragma once

#include <string>
#include <vector>

#include "diffret/backbone.hpp"
#include "diffret/data.hpp"
#include "diffret/features.hpp"
#include "diffret/prompting.hpp"

namespace diffret {

struct GalleryMeta {
    std::string class_name;
    std::string instance_id;
};

// Id-addressed store of pooled, combined, ensembled photo features.
struct GalleryIndex {
    std::vector<std::string> ids;
    std::vector<GalleryMeta> meta;   // parallel to ids
    int d_feat = 0;
    std::vector<float> features;     // N x d_feat, rows L2-normalized
    uint64_t fingerprint = 0;

    size_t size() const { return ids.size(); }
    const float* row(size_t i) const { return features.data() + i * static_cast<size_t>(d_feat); }
    void validate() const;  // unique ids, row norms within 1e-5 of 1
};

struct RetrievalResult {
    std::string query_id;
    std::vector<std::string> ranked_ids;
    std::vector<double> distances;  // non-decreasing; ties broken by ascending id
};

struct BuildReport {
    std::vector<std::string> skipped;  // unreadable items
    std::string to_text() const;
};

// Hash binding an index to the exact feature recipe: extraction config,
// backbone identity, conditioning mode and prompt contents.
uint64_t extraction_fingerprint(const ExtractionConfig& ext, const BackboneConfig& bb,
                                TextMode text_mode, const PromptSet& prompts);

// conditioning for one item under the chosen text mode
TextEmbedding conditioning_for(const Backbone& bb, const PromptSet& prompts, TextMode mode,
                               const ManifestItem& item);

// photo-side feature: visual prompt + batched ensembled extraction, normalized
std::vector<double> item_feature(const Backbone& bb, const PromptSet& prompts,
                                 const ExtractionConfig& ext, TextMode mode,
                                 const ManifestItem& item, const ImageF& pixels);

GalleryIndex build_gallery(const std::vector<ManifestItem>& photos, const PromptSet& prompts,
                           const ExtractionConfig& ext, const Backbone& bb,
                           TextMode text_mode = TextMode::Learned, BuildReport* report = nullptr,
                           unsigned threads = 0);

// Exhaustive nearest neighbors in double precision; refuses when the index
// fingerprint does not match the current recipe.
RetrievalResult query(const ManifestItem& sketch, const PromptSet& prompts,
                      const ExtractionConfig& ext, const Backbone& bb, const GalleryIndex& index,
                      int k, TextMode text_mode = TextMode::Learned);

// ranking of a raw query feature against the index (no fingerprint check);
// shared by query() and the evaluation loop
RetrievalResult rank_feature(const std::vector<double>& feature, const std::string& query_id,
                             const GalleryIndex& index, int k);

void save_gallery(const GalleryIndex& index, const std::string& path);
GalleryIndex load_gallery(const std::string& path);

}  // namespace diffret
