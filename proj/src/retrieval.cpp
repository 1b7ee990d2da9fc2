#include "diffret/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "diffret/parallel.hpp"
#include "diffret/rng.hpp"

using nlohmann::json;

namespace diffret {

void GalleryIndex::validate() const {
    if (ids.size() != meta.size()) throw DataError("gallery: ids/meta size mismatch");
    if (features.size() != ids.size() * static_cast<size_t>(d_feat))
        throw DataError("gallery: feature matrix size mismatch");
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw DataError("gallery: duplicate id " + id);
    for (size_t i = 0; i < ids.size(); ++i) {
        double s = 0.0;
        const float* r = row(i);
        for (int j = 0; j < d_feat; ++j) s += static_cast<double>(r[j]) * r[j];
        double nrm = std::sqrt(s);
        if (std::fabs(nrm - 1.0) > 1e-5)
            throw DataError("gallery: row " + ids[i] + " norm " + std::to_string(nrm));
    }
}

std::string BuildReport::to_text() const {
    std::ostringstream os;
    os << "gallery build report\nskipped items: " << skipped.size() << "\n";
    for (const auto& s : skipped) os << "  " << s << "\n";
    return os.str();
}

uint64_t extraction_fingerprint(const ExtractionConfig& ext, const BackboneConfig& bb,
                                TextMode text_mode, const PromptSet& prompts) {
    std::string recipe = ext.serialize() + "\ntext_mode=" + to_string(text_mode) + "\n" +
                         bb.serialize();
    return hash_combine(fnv1a64(recipe), prompt_checksum(prompts));
}

TextEmbedding conditioning_for(const Backbone& bb, const PromptSet& prompts, TextMode mode,
                               const ManifestItem& item) {
    switch (mode) {
        case TextMode::Learned: {
            TextEmbedding e;
            e.matrix = prompts.textual.matrix;
            return e;
        }
        case TextMode::ClassTemplate:
            return class_prompt_embedding(bb, item.class_name, false);
        default:
            return class_prompt_embedding(bb, item.caption, true);
    }
}

std::vector<double> item_feature(const Backbone& bb, const PromptSet& prompts,
                                 const ExtractionConfig& ext, TextMode mode,
                                 const ManifestItem& item, const ImageF& pixels) {
    const VisualPrompt& vp =
        item.modality == Modality::Sketch ? prompts.visual_sketch : prompts.photo_prompt();
    ImageF prompted = apply_visual_prompt(pixels, vp);
    TextEmbedding cond = conditioning_for(bb, prompts, mode, item);
    uint64_t seed = hash_combine(ext.base_seed, fnv1a64(item.id));
    FeatureVector f = extract_ensembled(bb, prompted, cond, ext, seed);
    return l2_normalized(f.values);
}

GalleryIndex build_gallery(const std::vector<ManifestItem>& photos, const PromptSet& prompts,
                           const ExtractionConfig& ext, const Backbone& bb, TextMode text_mode,
                           BuildReport* report, unsigned threads) {
    ext.validate(bb.config());
    GalleryIndex index;
    index.d_feat = extraction_dim(bb.config(), ext);
    index.fingerprint = extraction_fingerprint(ext, bb.config(), text_mode, prompts);

    const int side = bb.config().image_side;
    std::vector<std::vector<float>> rows(photos.size());
    std::vector<uint8_t> ok(photos.size(), 0);
    std::vector<std::string> errors(photos.size());

    parallel_for(
        photos.size(),
        [&](size_t i) {
            try {
                ImageRecord rec = load_and_preprocess(photos[i].path, side, photos[i].modality);
                std::vector<double> f =
                    item_feature(bb, prompts, ext, text_mode, photos[i], rec.pixels);
                rows[i].resize(f.size());
                for (size_t j = 0; j < f.size(); ++j) rows[i][j] = static_cast<float>(f[j]);
                ok[i] = 1;
            } catch (const DataError& e) {
                errors[i] = e.what();
            }
        },
        threads);

    for (size_t i = 0; i < photos.size(); ++i) {
        if (!ok[i]) {
            if (report) report->skipped.push_back(photos[i].id + ": " + errors[i]);
            continue;
        }
        if (static_cast<int>(rows[i].size()) != index.d_feat)
            throw ShapeError("gallery: feature dim " + std::to_string(rows[i].size()) +
                             " != " + std::to_string(index.d_feat));
        index.ids.push_back(photos[i].id);
        index.meta.push_back({photos[i].class_name, photos[i].instance_id});
        index.features.insert(index.features.end(), rows[i].begin(), rows[i].end());
    }
    return index;
}

RetrievalResult rank_feature(const std::vector<double>& feature, const std::string& query_id,
                             const GalleryIndex& index, int k) {
    if (static_cast<int>(feature.size()) != index.d_feat)
        throw ShapeError("query: feature dim mismatch");
    const size_t n = index.size();
    std::vector<double> dist(n);
    for (size_t i = 0; i < n; ++i) {
        const float* r = index.row(i);
        double s = 0.0;
        for (int j = 0; j < index.d_feat; ++j) {
            double d = feature[static_cast<size_t>(j)] - static_cast<double>(r[j]);
            s += d * d;
        }
        dist[i] = std::sqrt(s);
    }
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (dist[a] != dist[b]) return dist[a] < dist[b];
        return index.ids[a] < index.ids[b];
    });
    size_t take = std::min<size_t>(n, k < 0 ? n : static_cast<size_t>(k));
    RetrievalResult res;
    res.query_id = query_id;
    for (size_t i = 0; i < take; ++i) {
        res.ranked_ids.push_back(index.ids[order[i]]);
        res.distances.push_back(dist[order[i]]);
    }
    return res;
}

RetrievalResult query(const ManifestItem& sketch, const PromptSet& prompts,
                      const ExtractionConfig& ext, const Backbone& bb, const GalleryIndex& index,
                      int k, TextMode text_mode) {
    uint64_t fp = extraction_fingerprint(ext, bb.config(), text_mode, prompts);
    if (fp != index.fingerprint)
        throw FingerprintError(
            "query: index fingerprint " + std::to_string(index.fingerprint) +
            " does not match the current extraction recipe " + std::to_string(fp) +
            "; rebuild the gallery with the same config, prompts and text mode");
    ImageRecord rec = load_and_preprocess(sketch.path, bb.config().image_side, sketch.modality);
    std::vector<double> f = item_feature(bb, prompts, ext, text_mode, sketch, rec.pixels);
    return rank_feature(f, sketch.id, index, k);
}

namespace {

constexpr uint32_t kGalleryVersion = 1;

}  // namespace

void save_gallery(const GalleryIndex& index, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write feature store: " + path);
    out.write("DFEA", 4);
    uint32_t version = kGalleryVersion;
    uint64_t n = index.size();
    uint32_t d = static_cast<uint32_t>(index.d_feat);
    uint64_t fp = index.fingerprint;
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&n), 8);
    out.write(reinterpret_cast<const char*>(&d), 4);
    out.write(reinterpret_cast<const char*>(&fp), 8);
    out.write(reinterpret_cast<const char*>(index.features.data()),
              static_cast<std::streamsize>(index.features.size() * sizeof(float)));
    json meta = json::array();
    for (size_t i = 0; i < index.size(); ++i)
        meta.push_back(json{{"id", index.ids[i]},
                            {"class_name", index.meta[i].class_name},
                            {"instance_id", index.meta[i].instance_id}});
    out << json{{"items", meta}}.dump();
}

GalleryIndex load_gallery(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read feature store: " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "DFEA", 4) != 0)
        throw DataError("not a DFEA feature store: " + path);
    uint32_t version = 0, d = 0;
    uint64_t n = 0, fp = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&n), 8);
    in.read(reinterpret_cast<char*>(&d), 4);
    in.read(reinterpret_cast<char*>(&fp), 8);
    if (version != kGalleryVersion) throw DataError("unsupported DFEA version");

    GalleryIndex index;
    index.d_feat = static_cast<int>(d);
    index.fingerprint = fp;
    index.features.resize(n * d);
    in.read(reinterpret_cast<char*>(index.features.data()),
            static_cast<std::streamsize>(index.features.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(index.features.size() * sizeof(float)))
        throw DataError("truncated DFEA feature store: " + path);
    json meta;
    in >> meta;
    for (const auto& e : meta.at("items")) {
        index.ids.push_back(e.at("id").get<std::string>());
        index.meta.push_back(
            {e.at("class_name").get<std::string>(), e.value("instance_id", std::string{})});
    }
    if (index.ids.size() != n) throw DataError("DFEA id count mismatch");
    return index;
}

}  // namespace diffret
