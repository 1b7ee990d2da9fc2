#include "diffret/features.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "diffret/rng.hpp"

namespace diffret {

std::string to_string(CombineRule r) { return r == CombineRule::Mean ? "mean" : "concat"; }

CombineRule combine_from_string(const std::string& s) {
    if (s == "mean") return CombineRule::Mean;
    if (s == "concat") return CombineRule::Concat;
    throw ConfigError("unknown combine rule: " + s);
}

ExtractionConfig ExtractionConfig::defaults(TaskMode task) {
    ExtractionConfig c;
    c.task = task;
    if (task == TaskMode::Category) {
        c.layer_set = {1, 2};
        c.combine = CombineRule::Mean;
    } else {
        c.layer_set = {3, 4};
        c.combine = CombineRule::Concat;
    }
    return c;
}

void ExtractionConfig::validate(const BackboneConfig& bb) const {
    if (layer_set.empty()) throw ConfigError("extraction: layer_set must not be empty");
    for (int l : layer_set)
        if (l < 1 || l > 4) throw ConfigError("extraction: layer indices must be in 1..4");
    for (size_t i = 1; i < layer_set.size(); ++i)
        if (layer_set[i] <= layer_set[i - 1])
            throw ConfigError("extraction: layer_set must be strictly increasing");
    if (ensemble_size < 1) throw ConfigError("extraction: ensemble_size must be >= 1");
    if (t < 0 || t >= bb.total_steps) throw ConfigError("extraction: timestep outside schedule");
    // down-block widths vary per backbone; their mean-compatibility is caught
    // at combine time instead
    if (combine == CombineRule::Mean && !use_down_blocks) {
        auto uw = bb.up_widths();
        int first = uw[static_cast<size_t>(layer_set[0] - 1)];
        for (int l : layer_set)
            if (uw[static_cast<size_t>(l - 1)] != first)
                throw ConfigError("extraction: mean combine requires equal pooled dims");
    }
}

std::string ExtractionConfig::serialize() const {
    std::ostringstream os;
    os << "task=" << to_string(task) << ";t=" << t << ";layers=";
    for (size_t i = 0; i < layer_set.size(); ++i) os << (i ? "," : "") << layer_set[i];
    os << ";combine=" << to_string(combine) << ";ensemble=" << ensemble_size
       << ";seed=" << base_seed << ";source=" << (use_down_blocks ? "down" : "up");
    return os.str();
}

std::vector<double> pool_max(const ad::Tensor& map) {
    if (map.ndim() != 3) throw ShapeError("pool_max: map must be {a,b,c}");
    const int a = map.dim(0), b = map.dim(1), c = map.dim(2);
    std::vector<double> out(static_cast<size_t>(c));
    for (int ch = 0; ch < c; ++ch) out[static_cast<size_t>(ch)] = map.data[static_cast<size_t>(ch)];
    for (int p = 1; p < a * b; ++p) {
        const double* row = map.ptr() + static_cast<int64_t>(p) * c;
        for (int ch = 0; ch < c; ++ch)
            if (row[ch] > out[static_cast<size_t>(ch)]) out[static_cast<size_t>(ch)] = row[ch];
    }
    return out;
}

std::vector<double> combine(const std::vector<std::vector<double>>& pooled, CombineRule rule) {
    if (pooled.empty()) throw ShapeError("combine: no vectors");
    if (rule == CombineRule::Mean) {
        size_t d = pooled[0].size();
        for (const auto& v : pooled)
            if (v.size() != d) throw ShapeError("combine: mean over unequal lengths");
        std::vector<double> out(d, 0.0);
        for (const auto& v : pooled)
            for (size_t i = 0; i < d; ++i) out[i] += v[i];
        double inv = 1.0 / static_cast<double>(pooled.size());
        for (double& x : out) x *= inv;
        return out;
    }
    std::vector<double> out;
    for (const auto& v : pooled) out.insert(out.end(), v.begin(), v.end());
    return out;
}

int extraction_dim(const BackboneConfig& bb, const ExtractionConfig& cfg) {
    auto uw = bb.up_widths();
    // encoder-side capture widths of this denoiser family: stem, pre-down
    // block, post-down block, middle
    std::array<int, 4> dw = {uw[2], uw[2], uw[0], uw[0]};
    const auto& widths = cfg.use_down_blocks ? dw : uw;
    if (cfg.combine == CombineRule::Mean) {
        int first = widths[static_cast<size_t>(cfg.layer_set.at(0) - 1)];
        for (int l : cfg.layer_set)
            if (widths[static_cast<size_t>(l - 1)] != first)
                throw ConfigError("extraction: mean combine requires equal pooled dims");
        return first;
    }
    int total = 0;
    for (int l : cfg.layer_set) total += widths[static_cast<size_t>(l - 1)];
    return total;
}

std::vector<double> l2_normalized(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    double inv = 1.0 / std::max(std::sqrt(s), 1e-12);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv;
    return out;
}

namespace {

// Per-draw noise: draw k is seeded base_seed + k, independent of the batch size,
// so a batched ensemble pass reproduces individual single-draw extractions.
ad::Tensor batched_noise(const std::vector<int>& latent_shape, int k, uint64_t base_seed) {
    std::vector<int> shape = latent_shape;
    shape[0] = k;
    ad::Tensor out(shape);
    int64_t block = ad::Tensor::count(latent_shape);
    for (int i = 0; i < k; ++i) {
        ad::Tensor eps = gaussian_like(latent_shape, base_seed + static_cast<uint64_t>(i));
        std::copy(eps.data.begin(), eps.data.end(),
                  out.data.begin() + static_cast<int64_t>(i) * block);
    }
    return out;
}

}  // namespace

ad::NodeId extract_graph(ad::Tape& tape, const Backbone& bb, ad::NodeId image, ad::NodeId cond,
                         const ExtractionConfig& cfg, int k, uint64_t base_seed) {
    cfg.validate(bb.config());
    if (k < 1) throw ConfigError("extract: ensemble size must be >= 1");

    ad::NodeId z0 = bb.encode(tape, image);
    const std::vector<int> z_shape = tape.val(z0).shape;  // {1,hl,wl,c}

    double ab = bb.schedule().alpha_bars[static_cast<size_t>(cfg.t)];
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    ad::Tensor eps = batched_noise(z_shape, k, base_seed);
    for (double& v : eps.data) v *= sb;
    ad::NodeId z_t = tape.add_const(tape.scale(tape.tile_batch(z0, k), sa), eps);

    DenoiseGraph g = bb.denoise(tape, z_t, cfg.t, cond);

    std::vector<ad::NodeId> pooled;
    for (int l : cfg.layer_set) {
        ad::NodeId map = cfg.use_down_blocks ? g.down[static_cast<size_t>(l - 1)]
                                             : g.up[static_cast<size_t>(l - 1)];
        pooled.push_back(tape.global_max_pool(map));  // {k, c_l}
    }
    ad::NodeId feat;
    if (cfg.combine == CombineRule::Mean) {
        feat = tape.mean_list(pooled);
    } else {
        feat = pooled[0];
        for (size_t i = 1; i < pooled.size(); ++i) feat = tape.concat_last(feat, pooled[i]);
    }
    return tape.mean_batch(tape.l2_normalize(feat));
}

namespace {

FeatureVector run_extract(const Backbone& bb, const ImageF& image, const TextEmbedding& cond,
                          const ExtractionConfig& cfg, int k, uint64_t base_seed) {
    ad::Tape tape;
    ad::NodeId img = tape.input(image_tensor(image), false);
    ad::NodeId cn = tape.input(cond.matrix, false);
    ad::NodeId feat = extract_graph(tape, bb, img, cn, cfg, k, base_seed);
    FeatureVector out;
    out.values = tape.val(feat).data;
    out.task = cfg.task;
    out.layer_set = cfg.layer_set;
    out.t = cfg.t;
    out.ensemble_size = k;
    return out;
}

}  // namespace

FeatureVector extract(const Backbone& bb, const ImageF& image, const TextEmbedding& cond,
                      const ExtractionConfig& cfg, uint64_t seed) {
    return run_extract(bb, image, cond, cfg, 1, seed);
}

FeatureVector extract_ensembled(const Backbone& bb, const ImageF& image, const TextEmbedding& cond,
                                const ExtractionConfig& cfg, uint64_t base_seed) {
    return run_extract(bb, image, cond, cfg, cfg.ensemble_size, base_seed);
}

namespace {

// deterministic power iteration with deflation
std::vector<double> top_eigenvector(std::vector<double>& cov, int c, double* eigenvalue) {
    std::vector<double> v(static_cast<size_t>(c));
    for (int i = 0; i < c; ++i) v[static_cast<size_t>(i)] = 1.0 + 1e-3 * i;
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (double& x : v) x /= nrm;

    std::vector<double> w(static_cast<size_t>(c));
    double lambda = 0.0;
    for (int it = 0; it < 1000; ++it) {
        for (int i = 0; i < c; ++i) {
            double acc = 0.0;
            const double* row = cov.data() + static_cast<int64_t>(i) * c;
            for (int j = 0; j < c; ++j) acc += row[j] * v[static_cast<size_t>(j)];
            w[static_cast<size_t>(i)] = acc;
        }
        double wn = 0.0;
        for (double x : w) wn += x * x;
        wn = std::sqrt(wn);
        if (wn < 1e-300) {
            *eigenvalue = 0.0;
            return v;
        }
        double diff = 0.0;
        for (int i = 0; i < c; ++i) {
            double nv = w[static_cast<size_t>(i)] / wn;
            diff += std::fabs(nv - v[static_cast<size_t>(i)]);
            v[static_cast<size_t>(i)] = nv;
        }
        lambda = wn;
        if (diff < 1e-13 && it > 2) break;
    }
    *eigenvalue = lambda;
    return v;
}

}  // namespace

PcaRender pca_render(const ad::Tensor& feature_map) {
    if (feature_map.ndim() != 3) throw ShapeError("pca_render: map must be {a,b,c}");
    const int a = feature_map.dim(0), b = feature_map.dim(1), c = feature_map.dim(2);
    if (c < 3) throw ShapeError("pca_render: need at least 3 channels");
    const int n = a * b;

    std::vector<double> mean(static_cast<size_t>(c), 0.0);
    for (int p = 0; p < n; ++p) {
        const double* row = feature_map.ptr() + static_cast<int64_t>(p) * c;
        for (int i = 0; i < c; ++i) mean[static_cast<size_t>(i)] += row[i];
    }
    for (double& m : mean) m /= n;

    std::vector<double> centered(static_cast<size_t>(n) * c);
    for (int p = 0; p < n; ++p)
        for (int i = 0; i < c; ++i)
            centered[static_cast<size_t>(p) * c + i] =
                feature_map.data[static_cast<size_t>(p) * c + i] - mean[static_cast<size_t>(i)];

    std::vector<double> cov(static_cast<size_t>(c) * c, 0.0);
    for (int p = 0; p < n; ++p) {
        const double* row = centered.data() + static_cast<int64_t>(p) * c;
        for (int i = 0; i < c; ++i) {
            double xi = row[i];
            if (xi == 0.0) continue;
            double* cr = cov.data() + static_cast<int64_t>(i) * c;
            for (int j = 0; j < c; ++j) cr[j] += xi * row[j];
        }
    }
    double inv_n = n > 1 ? 1.0 / (n - 1) : 1.0;
    for (double& x : cov) x *= inv_n;

    PcaRender out;
    out.rgb = ImageF(a, b, 0.0);
    double lambda0 = 0.0;
    std::vector<std::vector<double>> comps;
    for (int k = 0; k < 3; ++k) {
        double lambda = 0.0;
        std::vector<double> v = top_eigenvector(cov, c, &lambda);
        if (k == 0) lambda0 = lambda;
        bool valid = lambda > 1e-12 && (lambda0 <= 0.0 || lambda > 1e-9 * lambda0);
        if (!valid) break;
        // fix sign for reproducibility: largest-magnitude entry positive
        int arg = 0;
        for (int i = 1; i < c; ++i)
            if (std::fabs(v[static_cast<size_t>(i)]) > std::fabs(v[static_cast<size_t>(arg)])) arg = i;
        if (v[static_cast<size_t>(arg)] < 0.0)
            for (double& x : v) x = -x;
        comps.push_back(v);
        // deflate
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < c; ++j)
                cov[static_cast<size_t>(i) * c + j] -= lambda * v[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];
    }
    out.rank = static_cast<int>(comps.size());
    out.degenerate = out.rank < 3;

    for (size_t k = 0; k < comps.size(); ++k) {
        std::vector<double> proj(static_cast<size_t>(n));
        for (int p = 0; p < n; ++p) {
            double acc = 0.0;
            const double* row = centered.data() + static_cast<int64_t>(p) * c;
            for (int i = 0; i < c; ++i) acc += row[i] * comps[k][static_cast<size_t>(i)];
            proj[static_cast<size_t>(p)] = acc;
        }
        double lo = *std::min_element(proj.begin(), proj.end());
        double hi = *std::max_element(proj.begin(), proj.end());
        double span = hi - lo;
        for (int p = 0; p < n; ++p)
            out.rgb.v[static_cast<size_t>(p) * 3 + k] =
                span > 1e-12 ? (proj[static_cast<size_t>(p)] - lo) / span : 0.0;
    }
    return out;
}

}  // namespace diffret
