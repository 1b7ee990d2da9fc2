#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "diffret/common.hpp"
#include "diffret/image.hpp"

namespace diffret {

enum class Modality { Sketch, Photo };

inline std::string to_string(Modality m) { return m == Modality::Sketch ? "sketch" : "photo"; }
inline Modality modality_from_string(const std::string& s) {
    if (s == "sketch") return Modality::Sketch;
    if (s == "photo") return Modality::Photo;
    throw DataError("unknown modality: " + s);
}

struct ManifestItem {
    std::string id;
    Modality modality = Modality::Photo;
    std::string class_name;
    std::string instance_id;  // empty when the layout has no fine-grained pairing
    std::string path;
    std::string caption;
};

struct InstancePair {
    std::vector<std::string> sketch_ids;
    std::vector<std::string> photo_ids;
};

struct DatasetManifest {
    std::vector<ManifestItem> items;
    std::map<std::string, InstancePair> pairing;  // instance_id -> ids

    void rebuild_pairing();
    void validate() const;  // unique ids, pairing classes consistent
    const ManifestItem* find(const std::string& id) const;
    std::vector<ManifestItem> select(Modality m, const std::set<std::string>& classes) const;
    std::set<std::string> class_names() const;
};

enum class DatasetLayout { SketchyLike, TuBerlinLike, QuickdrawLike, FlatPairs };

std::string to_string(DatasetLayout l);
DatasetLayout layout_from_string(const std::string& s);

struct IntegrityReport {
    std::vector<std::string> orphan_sketches;  // excluded: no paired photo
    std::vector<std::string> notes;
    std::string to_text() const;
};

// Layouts:
//   sketchy_like:   root/photo/<class>/<stem>.png, root/sketch/<class>/<stem>_<k>.png
//                   (fine-grained: sketch stem minus trailing _<k> names its photo)
//   tu_berlin_like: root/images/<class>/*.png, root/sketches/<class>/*.png (category only)
//   quickdraw_like: root/photo/<class>/*.png, root/sketch/<class>/*.png (category only)
//   flat_pairs:     root/<class>__<stem>__photo.png, root/<class>__<stem>__sketch.png
// Captions are read from root/captions.jsonl ({"id":...,"caption":...} per line) when present.
DatasetManifest scan_dataset(const std::string& root, DatasetLayout layout,
                             IntegrityReport* report = nullptr);

struct ImageRecord {
    ImageF pixels;  // {h,w,3} in [-1,1]
    int orig_h = 0;
    int orig_w = 0;
};

// Aspect-preserving resize + center pad to target_side on [-1,1] arrays.
// Sketches are grayscale-binarized to exact {-1,+1} black-on-white after the
// geometric ops, which makes the whole function idempotent.
ImageF preprocess(const ImageF& pixels, int target_side, Modality modality);
ImageRecord load_and_preprocess(const std::string& path, int target_side, Modality modality);

struct ToyDatasetSpec {
    int n_classes = 8;
    int n_instances = 5;
    int side = 64;
    uint64_t seed = 7;
};

// Procedural cross-modal dataset: per class a distinct shape family, per
// instance jittered geometry; "photo" = filled textured rendering, "sketch" =
// outline rendering of identical geometry. Writes a sketchy_like tree plus
// manifest.json, captions.jsonl and toy_params.json (per-instance geometry).
DatasetManifest generate_toy_dataset(const ToyDatasetSpec& spec, const std::string& out_root);

struct ToyInstanceParams {
    std::string instance_id;
    std::string class_name;
    std::vector<double> geometry;  // {points, inner_ratio, aspect}
};
std::vector<ToyInstanceParams> read_toy_params(const std::string& root);

void write_manifest_json(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest_json(const std::string& path);

}  // namespace diffret
