#include "diffret/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "diffret/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace diffret {

void DatasetManifest::rebuild_pairing() {
    pairing.clear();
    for (const auto& it : items) {
        if (it.instance_id.empty()) continue;
        auto& p = pairing[it.instance_id];
        (it.modality == Modality::Sketch ? p.sketch_ids : p.photo_ids).push_back(it.id);
    }
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    std::map<std::string, std::string> instance_class;
    for (const auto& it : items) {
        if (!ids.insert(it.id).second) throw DataError("duplicate item id: " + it.id);
        if (!it.instance_id.empty()) {
            auto [pos, inserted] = instance_class.emplace(it.instance_id, it.class_name);
            if (!inserted && pos->second != it.class_name)
                throw DataError("instance " + it.instance_id + " spans classes " + pos->second +
                                " and " + it.class_name);
        }
    }
}

const ManifestItem* DatasetManifest::find(const std::string& id) const {
    for (const auto& it : items)
        if (it.id == id) return &it;
    return nullptr;
}

std::vector<ManifestItem> DatasetManifest::select(Modality m,
                                                  const std::set<std::string>& classes) const {
    std::vector<ManifestItem> out;
    for (const auto& it : items)
        if (it.modality == m && (classes.empty() || classes.count(it.class_name))) out.push_back(it);
    return out;
}

std::set<std::string> DatasetManifest::class_names() const {
    std::set<std::string> out;
    for (const auto& it : items) out.insert(it.class_name);
    return out;
}

std::string to_string(DatasetLayout l) {
    switch (l) {
        case DatasetLayout::SketchyLike: return "sketchy_like";
        case DatasetLayout::TuBerlinLike: return "tu_berlin_like";
        case DatasetLayout::QuickdrawLike: return "quickdraw_like";
        default: return "flat_pairs";
    }
}

DatasetLayout layout_from_string(const std::string& s) {
    if (s == "sketchy_like") return DatasetLayout::SketchyLike;
    if (s == "tu_berlin_like") return DatasetLayout::TuBerlinLike;
    if (s == "quickdraw_like") return DatasetLayout::QuickdrawLike;
    if (s == "flat_pairs") return DatasetLayout::FlatPairs;
    throw ConfigError("unknown dataset layout: " + s);
}

std::string IntegrityReport::to_text() const {
    std::ostringstream os;
    os << "integrity report\n";
    os << "orphan sketches excluded: " << orphan_sketches.size() << "\n";
    for (const auto& s : orphan_sketches) os << "  " << s << "\n";
    for (const auto& s : notes) os << "note: " << s << "\n";
    return os.str();
}

namespace {

std::vector<std::string> sorted_entries(const fs::path& dir, bool dirs) {
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (dirs && e.is_directory()) out.push_back(e.path().filename().string());
        if (!dirs && e.is_regular_file()) out.push_back(e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string stem_of(const std::string& filename) {
    auto dot = filename.find_last_of('.');
    return dot == std::string::npos ? filename : filename.substr(0, dot);
}

bool is_image_file(const std::string& name) {
    auto dot = name.find_last_of('.');
    if (dot == std::string::npos) return false;
    std::string ext = name.substr(dot + 1);
    for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == "png";
}

// strips one trailing _<digits> suffix: "cat_03_1" -> "cat_03"
std::string strip_sketch_index(const std::string& stem) {
    auto us = stem.find_last_of('_');
    if (us == std::string::npos || us + 1 >= stem.size()) return stem;
    for (size_t i = us + 1; i < stem.size(); ++i)
        if (!std::isdigit(static_cast<unsigned char>(stem[i]))) return stem;
    return stem.substr(0, us);
}

void attach_captions(const std::string& root, DatasetManifest& m) {
    fs::path f = fs::path(root) / "captions.jsonl";
    if (!fs::exists(f)) return;
    std::map<std::string, std::string> caps;
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        caps[j.at("id").get<std::string>()] = j.at("caption").get<std::string>();
    }
    for (auto& it : m.items) {
        auto pos = caps.find(it.id);
        if (pos != caps.end()) it.caption = pos->second;
    }
}

void scan_class_tree(const fs::path& root, const std::string& subdir, Modality mod,
                     bool with_instances, DatasetManifest& m) {
    for (const auto& cls : sorted_entries(root / subdir, true)) {
        for (const auto& file : sorted_entries(root / subdir / cls, false)) {
            if (!is_image_file(file)) continue;
            ManifestItem it;
            it.modality = mod;
            it.class_name = cls;
            std::string stem = stem_of(file);
            it.id = subdir + "/" + cls + "/" + stem;
            it.path = (root / subdir / cls / file).string();
            if (with_instances)
                it.instance_id = mod == Modality::Sketch ? strip_sketch_index(stem) : stem;
            m.items.push_back(std::move(it));
        }
    }
}

}  // namespace

DatasetManifest scan_dataset(const std::string& root, DatasetLayout layout,
                             IntegrityReport* report) {
    if (!fs::exists(root)) throw DataError("dataset root does not exist: " + root);
    DatasetManifest m;
    switch (layout) {
        case DatasetLayout::SketchyLike:
            scan_class_tree(root, "photo", Modality::Photo, true, m);
            scan_class_tree(root, "sketch", Modality::Sketch, true, m);
            break;
        case DatasetLayout::TuBerlinLike:
            scan_class_tree(root, "images", Modality::Photo, false, m);
            scan_class_tree(root, "sketches", Modality::Sketch, false, m);
            break;
        case DatasetLayout::QuickdrawLike:
            scan_class_tree(root, "photo", Modality::Photo, false, m);
            scan_class_tree(root, "sketch", Modality::Sketch, false, m);
            break;
        case DatasetLayout::FlatPairs:
            for (const auto& file : sorted_entries(root, false)) {
                if (!is_image_file(file)) continue;
                std::string stem = stem_of(file);
                auto p1 = stem.find("__");
                auto p2 = stem.rfind("__");
                if (p1 == std::string::npos || p2 == p1) continue;
                ManifestItem it;
                it.class_name = stem.substr(0, p1);
                it.instance_id = stem.substr(p1 + 2, p2 - p1 - 2);
                std::string mod = stem.substr(p2 + 2);
                if (mod != "photo" && mod != "sketch") continue;
                it.modality = modality_from_string(mod);
                it.id = stem;
                it.path = (fs::path(root) / file).string();
                m.items.push_back(std::move(it));
            }
            break;
    }

    // fine-grained layouts: drop sketches whose instance has no photo
    if (layout == DatasetLayout::SketchyLike || layout == DatasetLayout::FlatPairs) {
        std::set<std::string> photo_instances;
        for (const auto& it : m.items)
            if (it.modality == Modality::Photo) photo_instances.insert(it.instance_id);
        std::vector<ManifestItem> kept;
        for (auto& it : m.items) {
            if (it.modality == Modality::Sketch && !photo_instances.count(it.instance_id)) {
                if (report) report->orphan_sketches.push_back(it.id);
                continue;
            }
            kept.push_back(std::move(it));
        }
        m.items = std::move(kept);
    }

    attach_captions(root, m);
    m.validate();
    m.rebuild_pairing();
    return m;
}

ImageF preprocess(const ImageF& pixels, int target_side, Modality modality) {
    if (target_side <= 0) throw ShapeError("preprocess: target side must be positive");
    if (pixels.h <= 0 || pixels.w <= 0) throw ShapeError("preprocess: empty image");

    double scale = static_cast<double>(target_side) / std::max(pixels.h, pixels.w);
    int nh = std::max(1, static_cast<int>(std::lround(pixels.h * scale)));
    int nw = std::max(1, static_cast<int>(std::lround(pixels.w * scale)));
    nh = std::min(nh, target_side);
    nw = std::min(nw, target_side);
    ImageF resized = resize_bilinear(pixels, nh, nw);

    double pad = modality == Modality::Sketch ? 1.0 : 0.0;  // white vs mid-gray
    ImageF out(target_side, target_side, pad);
    int oy = (target_side - nh) / 2;
    int ox = (target_side - nw) / 2;
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x) {
            const double* s = resized.px(y, x);
            double* d = out.px(y + oy, x + ox);
            d[0] = s[0];
            d[1] = s[1];
            d[2] = s[2];
        }

    if (modality == Modality::Sketch) {
        // grayscale threshold at mid-range; exact {-1,+1} keeps this idempotent
        for (int y = 0; y < target_side; ++y)
            for (int x = 0; x < target_side; ++x) {
                double* p = out.px(y, x);
                double g = (p[0] + p[1] + p[2]) / 3.0;
                double v = g > 0.0 ? 1.0 : -1.0;
                p[0] = p[1] = p[2] = v;
            }
    }
    return out;
}

ImageRecord load_and_preprocess(const std::string& path, int target_side, Modality modality) {
    ImageU8 raw = read_png(path);  // throws DataError with path when undecodable
    ImageF f = to_float(raw);
    for (double& v : f.v) v = v * 2.0 - 1.0;
    ImageRecord rec;
    rec.orig_h = raw.h;
    rec.orig_w = raw.w;
    rec.pixels = preprocess(f, target_side, modality);
    return rec;
}

// --- toy dataset ------------------------------------------------------------

namespace {

struct ShapeGeom {
    int points = 3;
    double inner_ratio = 1.0;
    double aspect = 1.0;
    double rotation = 0.0;
    double scale = 0.7;   // fraction of half-side
    double cx = 0.5, cy = 0.5;
    std::vector<double> radial_jitter;
};

struct PhotoStyle {
    double base[3] = {0.4, 0.4, 0.4};
    double stripe_freq = 0.3;
    double stripe_angle = 0.0;
    double stripe_amp = 0.08;
};

// Alternating polygon and star families keep neighboring class indices
// geometrically far apart, so any contiguous seen/unseen split stays separable.
struct ClassBase {
    std::string name;
    int points;
    double inner_ratio;
    double aspect;
};

const ClassBase kClassBases[10] = {
    {"triangle", 3, 1.0, 1.0}, {"star5", 5, 0.50, 1.0},  {"square", 4, 1.0, 0.85},
    {"star7", 7, 0.45, 1.0},   {"hexagon", 6, 1.0, 1.0}, {"star4", 4, 0.40, 0.9},
    {"octagon", 8, 1.0, 1.0},  {"star6", 6, 0.55, 0.85}, {"pentagon", 5, 1.0, 1.0},
    {"decagon", 10, 1.0, 0.9},
};

ClassBase class_base(int c) {
    ClassBase b = kClassBases[c % 10];
    if (c >= 10) {
        b.name = "poly" + std::to_string(c);
        b.points += 10 * (c / 10);  // keep geometry parameters class-disjoint
    }
    return b;
}

std::vector<std::pair<double, double>> shape_vertices(const ShapeGeom& g, double canvas) {
    std::vector<std::pair<double, double>> v;
    int n = g.inner_ratio < 0.999 ? 2 * g.points : g.points;
    double r_out = g.scale * canvas * 0.5;
    for (int i = 0; i < n; ++i) {
        double frac = static_cast<double>(i) / n;
        double ang = g.rotation + frac * 2.0 * M_PI;
        double r = r_out;
        if (g.inner_ratio < 0.999 && (i % 2 == 1)) r *= g.inner_ratio;
        int jidx = i % static_cast<int>(g.radial_jitter.size());
        r *= g.radial_jitter[static_cast<size_t>(jidx)];
        v.emplace_back(g.cx * canvas + r * g.aspect * std::cos(ang),
                       g.cy * canvas + r * std::sin(ang));
    }
    return v;
}

bool point_in_polygon(double px, double py, const std::vector<std::pair<double, double>>& v) {
    bool inside = false;
    size_t n = v.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        double xi = v[i].first, yi = v[i].second;
        double xj = v[j].first, yj = v[j].second;
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
    }
    return inside;
}

double dist_to_edges(double px, double py, const std::vector<std::pair<double, double>>& v) {
    double best = 1e30;
    size_t n = v.size();
    for (size_t i = 0, j = n - 1; i < n; j = i++) {
        double ax = v[j].first, ay = v[j].second;
        double bx = v[i].first, by = v[i].second;
        double dx = bx - ax, dy = by - ay;
        double len2 = dx * dx + dy * dy;
        double t = len2 > 0 ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0) : 0.0;
        double ex = ax + t * dx - px, ey = ay + t * dy - py;
        best = std::min(best, std::sqrt(ex * ex + ey * ey));
    }
    return best;
}

ImageU8 render_shape(const ShapeGeom& g, const PhotoStyle& style, int side, bool outline_only) {
    const int S = 4;  // supersampling factor
    const int cs = side * S;
    auto verts = shape_vertices(g, cs);
    // strokes must survive the backbone's 8x latent downsampling
    double stroke = std::max(2.0, side / 20.0) * S * 0.5;
    ImageF hi(cs, cs);
    double cth = std::cos(style.stripe_angle), sth = std::sin(style.stripe_angle);
    for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) {
            double px = x + 0.5, py = y + 0.5;
            double* p = hi.px(y, x);
            if (outline_only) {
                double v = dist_to_edges(px, py, verts) <= stroke ? 0.0 : 1.0;
                p[0] = p[1] = p[2] = v;
            } else if (dist_to_edges(px, py, verts) <= stroke) {
                // objects carry a dark boundary, like the sketch strokes
                p[0] = p[1] = p[2] = 0.08;
            } else if (point_in_polygon(px, py, verts)) {
                double tex =
                    style.stripe_amp * std::sin(style.stripe_freq * (px * cth + py * sth) / S);
                for (int c = 0; c < 3; ++c) p[c] = std::clamp(style.base[c] + tex, 0.0, 1.0);
            } else {
                double bg = 0.88 + 0.06 * (static_cast<double>(y) / cs);
                p[0] = p[1] = p[2] = bg;
            }
        }
    // box-downsample
    ImageF lo(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            double acc[3] = {0, 0, 0};
            for (int dy = 0; dy < S; ++dy)
                for (int dx = 0; dx < S; ++dx) {
                    const double* p = hi.px(y * S + dy, x * S + dx);
                    acc[0] += p[0];
                    acc[1] += p[1];
                    acc[2] += p[2];
                }
            double* o = lo.px(y, x);
            for (int c = 0; c < 3; ++c) o[c] = acc[c] / (S * S);
        }
    return to_u8(lo);
}

}  // namespace

DatasetManifest generate_toy_dataset(const ToyDatasetSpec& spec, const std::string& out_root) {
    if (spec.n_classes < 2 || spec.n_instances < 2)
        throw ConfigError("toy dataset: need n_classes >= 2 and n_instances >= 2");

    fs::create_directories(out_root);
    DatasetManifest m;
    json params = json::array();
    std::ofstream captions(fs::path(out_root) / "captions.jsonl");

    for (int c = 0; c < spec.n_classes; ++c) {
        ClassBase base = class_base(c);
        fs::create_directories(fs::path(out_root) / "photo" / base.name);
        fs::create_directories(fs::path(out_root) / "sketch" / base.name);
        for (int i = 0; i < spec.n_instances; ++i) {
            Rng rng(hash_combine(hash_combine(spec.seed, static_cast<uint64_t>(c)),
                                 static_cast<uint64_t>(i)));
            ShapeGeom g;
            g.points = base.points;
            g.inner_ratio = std::max(0.2, base.inner_ratio + rng.uniform(-0.04, 0.04));
            g.aspect = std::clamp(base.aspect + rng.uniform(-0.08, 0.08), 0.5, 1.0);
            g.rotation = rng.uniform(0.0, 2.0 * M_PI);
            g.scale = rng.uniform(0.5, 0.8);
            g.cx = rng.uniform(0.42, 0.58);
            g.cy = rng.uniform(0.42, 0.58);
            int nj = base.inner_ratio < 0.999 ? 2 * base.points : base.points;
            g.radial_jitter.resize(static_cast<size_t>(nj));
            for (double& j : g.radial_jitter) j = rng.uniform(0.94, 1.06);

            PhotoStyle style;
            double hue = rng.uniform(0.0, 1.0);
            style.base[0] = 0.45 + 0.22 * std::fabs(std::sin(2 * M_PI * hue));
            style.base[1] = 0.45 + 0.22 * std::fabs(std::sin(2 * M_PI * hue + 2.1));
            style.base[2] = 0.45 + 0.22 * std::fabs(std::sin(2 * M_PI * hue + 4.2));
            style.stripe_freq = rng.uniform(0.15, 0.5);
            style.stripe_angle = rng.uniform(0.0, M_PI);
            style.stripe_amp = rng.uniform(0.03, 0.07);

            char inst[64];
            std::snprintf(inst, sizeof(inst), "%s_%02d", base.name.c_str(), i);
            std::string photo_rel = "photo/" + base.name + "/" + inst + ".png";
            std::string sketch_rel = "sketch/" + base.name + "/" + inst + "_1.png";

            write_png((fs::path(out_root) / photo_rel).string(),
                      render_shape(g, style, spec.side, false));
            write_png((fs::path(out_root) / sketch_rel).string(),
                      render_shape(g, style, spec.side, true));

            ManifestItem photo{"photo/" + base.name + "/" + inst, Modality::Photo, base.name, inst,
                               (fs::path(out_root) / photo_rel).string(),
                               "a photo of a " + base.name};
            ManifestItem sketch{"sketch/" + base.name + "/" + inst + "_1", Modality::Sketch,
                                base.name, inst, (fs::path(out_root) / sketch_rel).string(),
                                "a sketch of a " + base.name};
            captions << json{{"id", photo.id}, {"caption", photo.caption}}.dump() << "\n";
            captions << json{{"id", sketch.id}, {"caption", sketch.caption}}.dump() << "\n";
            m.items.push_back(std::move(photo));
            m.items.push_back(std::move(sketch));

            params.push_back(json{{"instance_id", inst},
                                  {"class_name", base.name},
                                  {"geometry", {static_cast<double>(g.points), g.inner_ratio, g.aspect}}});
        }
    }

    std::ofstream pf(fs::path(out_root) / "toy_params.json");
    pf << params.dump(1) << "\n";

    m.validate();
    m.rebuild_pairing();
    write_manifest_json(m, (fs::path(out_root) / "manifest.json").string());
    return m;
}

std::vector<ToyInstanceParams> read_toy_params(const std::string& root) {
    std::ifstream in(fs::path(root) / "toy_params.json");
    if (!in) throw DataError("missing toy_params.json under " + root);
    json j;
    in >> j;
    std::vector<ToyInstanceParams> out;
    for (const auto& e : j) {
        ToyInstanceParams p;
        p.instance_id = e.at("instance_id").get<std::string>();
        p.class_name = e.at("class_name").get<std::string>();
        p.geometry = e.at("geometry").get<std::vector<double>>();
        out.push_back(std::move(p));
    }
    return out;
}

void write_manifest_json(const DatasetManifest& m, const std::string& path) {
    json items = json::array();
    for (const auto& it : m.items) {
        json e{{"id", it.id},
               {"modality", to_string(it.modality)},
               {"class_name", it.class_name},
               {"instance_id", it.instance_id},
               {"path", it.path}};
        if (!it.caption.empty()) e["caption"] = it.caption;
        items.push_back(std::move(e));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << json{{"items", items}}.dump(1) << "\n";
}

DatasetManifest read_manifest_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read manifest: " + path);
    json j;
    in >> j;
    DatasetManifest m;
    for (const auto& e : j.at("items")) {
        ManifestItem it;
        it.id = e.at("id").get<std::string>();
        it.modality = modality_from_string(e.at("modality").get<std::string>());
        it.class_name = e.at("class_name").get<std::string>();
        it.instance_id = e.value("instance_id", "");
        it.path = e.at("path").get<std::string>();
        it.caption = e.value("caption", "");
        m.items.push_back(std::move(it));
    }
    m.validate();
    m.rebuild_pairing();
    return m;
}

}  // namespace diffret
