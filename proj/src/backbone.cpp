#include "diffret/backbone.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "diffret/rng.hpp"

namespace diffret {

NoiseSchedule build_noise_schedule(const ScheduleSpec& spec) {
    if (spec.total_steps < 1) throw ConfigError("schedule: total_steps must be >= 1");
    NoiseSchedule s;
    s.total_steps = spec.total_steps;
    s.alphas.resize(static_cast<size_t>(spec.total_steps));

    if (spec.family == "identity") {
        std::fill(s.alphas.begin(), s.alphas.end(), 1.0);
    } else if (spec.family == "linear" || spec.family == "scaled_linear") {
        if (!(spec.beta_start > 0.0 && spec.beta_start < 1.0) ||
            !(spec.beta_end > 0.0 && spec.beta_end < 1.0) || spec.beta_start > spec.beta_end)
            throw ConfigError("schedule: beta endpoints must satisfy 0 < beta_start <= beta_end < 1");
        const int T = spec.total_steps;
        for (int t = 0; t < T; ++t) {
            double u = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
            double beta;
            if (spec.family == "linear") {
                beta = spec.beta_start + (spec.beta_end - spec.beta_start) * u;
            } else {
                double r = std::sqrt(spec.beta_start) + (std::sqrt(spec.beta_end) - std::sqrt(spec.beta_start)) * u;
                beta = r * r;
            }
            s.alphas[static_cast<size_t>(t)] = 1.0 - beta;
        }
    } else {
        throw ConfigError("schedule: unknown family '" + spec.family + "'");
    }

    s.alpha_bars.resize(s.alphas.size());
    double prod = 1.0;
    for (size_t t = 0; t < s.alphas.size(); ++t) {
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

BackboneConfig BackboneConfig::toy(uint64_t seed) {
    BackboneConfig c;
    c.model_id = "toy";
    c.seed = seed;
    return c;
}

BackboneConfig BackboneConfig::reference(const std::string& version) {
    BackboneConfig c;
    c.model_id = version;
    c.d_emb = 1024;
    c.width_scale = 1;
    c.image_side = 256;
    return c;
}

std::array<int, 4> BackboneConfig::up_widths() const {
    return {1280 / width_scale, 1280 / width_scale, 640 / width_scale, 320 / width_scale};
}

void BackboneConfig::validate() const {
    if (total_steps < 1) throw ConfigError("backbone: T must be >= 1");
    if (d_emb < 1) throw ConfigError("backbone: d_emb must be >= 1");
    if (latent_channels < 1) throw ConfigError("backbone: latent_channels must be >= 1");
    if (width_scale < 1 || 1280 % width_scale != 0 || 640 % width_scale != 0 ||
        320 % width_scale != 0 || (320 / width_scale) % 4 != 0)
        throw ConfigError("backbone: width_scale must divide {1280,640,320} leaving multiples of 4");
    if (image_side % 32 != 0) throw ConfigError("backbone: image_side must be divisible by 32");
}

std::string BackboneConfig::serialize() const {
    std::ostringstream os;
    os << "model_id = " << model_id << "\n"
       << "T = " << total_steps << "\n"
       << "schedule = " << schedule << "\n"
       << "beta_start = " << beta_start << "\n"
       << "beta_end = " << beta_end << "\n"
       << "d_emb = " << d_emb << "\n"
       << "latent_channels = " << latent_channels << "\n"
       << "image_side = " << image_side << "\n"
       << "seed = " << seed << "\n"
       << "width_scale = " << width_scale << "\n";
    return os.str();
}

std::array<std::array<int, 3>, 4> captured_shapes(const BackboneConfig& cfg, int h, int w) {
    if (h % 32 != 0 || w % 32 != 0) throw ShapeError("captured_shapes: h and w must be divisible by 32");
    auto uw = cfg.up_widths();
    return {{{h / 32, w / 32, uw[0]},
             {h / 16, w / 16, uw[1]},
             {h / 8, w / 8, uw[2]},
             {h / 8, w / 8, uw[3]}}};
}

int feature_dim(const BackboneConfig& cfg, TaskMode task) {
    auto uw = cfg.up_widths();
    if (task == TaskMode::Category) {
        if (uw[0] != uw[1]) throw ConfigError("category features need equal block-1/2 widths");
        return uw[0];
    }
    return uw[2] + uw[3];
}

ad::Tensor image_tensor(const ImageF& img) {
    ad::Tensor t({1, img.h, img.w, 3});
    t.data = img.v;
    return t;
}

ad::Tensor gaussian_like(const std::vector<int>& shape, uint64_t seed) {
    ad::Tensor t(shape);
    Rng rng(seed);
    for (double& v : t.data) v = rng.gaussian();
    return t;
}

LatentImage forward_noise(const LatentImage& z0, int t, const ad::Tensor& eps,
                          const NoiseSchedule& schedule) {
    if (t < 0 || t >= schedule.total_steps)
        throw RangeError("forward_noise: timestep " + std::to_string(t) + " outside [0," +
                         std::to_string(schedule.total_steps) + ")");
    if (!z0.data.same_shape(eps)) throw ShapeError("forward_noise: eps shape mismatch");
    double ab = schedule.alpha_bars[static_cast<size_t>(t)];
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    LatentImage out;
    out.source_id = z0.source_id;
    out.data = ad::Tensor(z0.data.shape);
    for (int64_t i = 0; i < z0.data.numel(); ++i)
        out.data.data[i] = sa * z0.data.data[i] + sb * eps.data[i];
    return out;
}

namespace {

using ad::NodeId;
using ad::Tape;
using ad::Tensor;

struct Conv {
    Tensor w;  // {kh,kw,ci,co}
    Tensor b;  // {co}
    int stride = 1;
    int pad = 1;
};

struct Lin {
    Tensor w;  // {in,out}
    Tensor b;  // {out}
};

struct Res {
    Conv c1, c2, skip;
    Lin emb;
    bool has_skip = false;
};

struct Attn {
    Lin q, k, v, o;
};

struct Stage {
    Res res;
    Attn attn;
};

constexpr int kGroups = 4;
constexpr int kTokens = 77;
constexpr int kVocab = 509;  // hash buckets for the toy tokenizer; id 0 is padding
constexpr int kSinDim = 32;

Tensor sinusoidal_embedding(int t, int dim) {
    Tensor out({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        out.data[i] = std::cos(t * freq);
        out.data[half + i] = std::sin(t * freq);
    }
    return out;
}

Tensor lin_apply(const Lin& l, const Tensor& x) {
    int in = l.w.dim(0), out = l.w.dim(1);
    Tensor y({out});
    if (!l.b.empty()) y.data = l.b.data;
    for (int i = 0; i < in; ++i) {
        double xv = x.data[i];
        const double* wr = l.w.ptr() + static_cast<int64_t>(i) * out;
        for (int o = 0; o < out; ++o) y.data[o] += xv * wr[o];
    }
    return y;
}

void silu_inplace(Tensor& x) {
    for (double& v : x.data) v = v / (1.0 + std::exp(-v));
}

class ToyBackbone final : public Backbone {
public:
    explicit ToyBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        sched_ = build_noise_schedule(cfg_.schedule_spec());
        init_weights();
    }

    const BackboneConfig& config() const override { return cfg_; }
    const NoiseSchedule& schedule() const override { return sched_; }

    uint64_t weight_checksum() const override {
        uint64_t h = 0xcbf29ce484222325ull;
        for_each_weight([&](const Tensor& t) { h = hash_combine(h, ad::checksum(t)); });
        return h;
    }

    TextEmbedding embed_text(const std::string& prompt) const override {
        std::vector<int> ids;
        std::string tok;
        auto flush = [&]() {
            if (!tok.empty()) {
                ids.push_back(1 + static_cast<int>(fnv1a64(tok) % (kVocab - 1)));
                tok.clear();
            }
        };
        for (char ch : prompt) {
            if (std::isalnum(static_cast<unsigned char>(ch)))
                tok.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            else
                flush();
        }
        flush();

        TextEmbedding emb;
        if (static_cast<int>(ids.size()) > kTokens) {
            emb.truncated = true;
            emb.warning = "prompt exceeds " + std::to_string(kTokens) + " tokens; truncated";
            ids.resize(kTokens);
        }
        emb.matrix = Tensor({kTokens, cfg_.d_emb});
        for (int p = 0; p < kTokens; ++p) {
            int id = p < static_cast<int>(ids.size()) ? ids[static_cast<size_t>(p)] : 0;
            const double* tr = tok_emb_.ptr() + static_cast<int64_t>(id) * cfg_.d_emb;
            const double* pr = pos_emb_.ptr() + static_cast<int64_t>(p) * cfg_.d_emb;
            double* o = emb.matrix.ptr() + static_cast<int64_t>(p) * cfg_.d_emb;
            for (int c = 0; c < cfg_.d_emb; ++c) o[c] = tr[c] + pr[c];
        }
        return emb;
    }

    NodeId encode(Tape& tape, NodeId image) const override { return encode_impl(tape, image, nullptr); }

    NodeId encode_sampled(Tape& tape, NodeId image, uint64_t seed) const override {
        return encode_impl(tape, image, &seed);
    }

    DenoiseGraph denoise(Tape& tape, NodeId z_t, int t, NodeId cond) const override {
        const Tensor& zv = tape.val(z_t);
        if (zv.ndim() != 4 || zv.dim(3) != cfg_.latent_channels)
            throw ShapeError("denoise: latent must be {n,hl,wl," + std::to_string(cfg_.latent_channels) + "}");
        if (zv.dim(1) % 4 != 0 || zv.dim(2) % 4 != 0)
            throw ShapeError("denoise: latent spatial dims must be divisible by 4");
        if (t < 0 || t >= sched_.total_steps) throw RangeError("denoise: timestep out of range");
        const Tensor& cv = tape.val(cond);
        if (cv.ndim() != 2 || cv.dim(0) != kTokens || cv.dim(1) != cfg_.d_emb)
            throw ShapeError("denoise: conditioning must be {77," + std::to_string(cfg_.d_emb) + "}");

        // time embedding is constant w.r.t. all trainable inputs
        Tensor temb = lin_apply(temb1_, sinusoidal_embedding(t, kSinDim));
        silu_inplace(temb);
        temb = lin_apply(temb2_, temb);
        silu_inplace(temb);

        DenoiseGraph g;
        NodeId x0 = conv(tape, conv_in_, z_t);
        NodeId d1 = stage(tape, down1_, x0, temb, cond);
        NodeId d1s = conv(tape, down1_ds_, d1);
        NodeId d2 = stage(tape, down2_, d1s, temb, cond);
        NodeId d2s = conv(tape, down2_ds_, d2);
        NodeId m = res(tape, mid1_, d2s, temb);
        m = attn(tape, mid_attn_, m, cond);
        m = res(tape, mid2_, m, temb);

        NodeId u1 = stage(tape, up1_, tape.concat_last(m, d2s), temb, cond);
        g.up[0] = u1;
        NodeId u1u = conv(tape, up1_us_, tape.upsample2x(u1));
        NodeId u2 = stage(tape, up2_, tape.concat_last(u1u, d2), temb, cond);
        g.up[1] = u2;
        NodeId u2u = conv(tape, up2_us_, tape.upsample2x(u2));
        NodeId u3 = stage(tape, up3_, tape.concat_last(u2u, d1), temb, cond);
        g.up[2] = u3;
        NodeId u4 = stage(tape, up4_, tape.concat_last(u3, x0), temb, cond);
        g.up[3] = u4;

        NodeId out = tape.group_norm(u4, kGroups);
        out = tape.silu(out);
        g.eps_hat = conv(tape, conv_out_, out);
        g.down = {x0, d1, d2, m};
        return g;
    }

private:
    NodeId encode_impl(Tape& tape, NodeId image, const uint64_t* seed) const {
        const Tensor& iv = tape.val(image);
        if (iv.ndim() != 4 || iv.dim(3) != 3) throw ShapeError("encode: image must be {n,h,w,3}");
        if (iv.dim(1) % 8 != 0 || iv.dim(2) % 8 != 0)
            throw ShapeError("encode: image dims must be divisible by 8, got " +
                             std::to_string(iv.dim(1)) + "x" + std::to_string(iv.dim(2)));
        NodeId x = tape.silu(conv(tape, enc1_, image));
        x = tape.silu(conv(tape, enc2_, x));
        x = tape.silu(conv(tape, enc3_, x));
        x = tape.silu(conv(tape, enc4_, x));
        x = conv(tape, enc_out_, x);  // {n,h/8,w/8,2*c_lat}
        NodeId mean = tape.slice_last(x, 0, cfg_.latent_channels);
        if (!seed) return mean;
        NodeId logvar = tape.slice_last(x, cfg_.latent_channels, cfg_.latent_channels);
        NodeId std_dev = tape.exp(tape.scale(logvar, 0.5));
        Tensor eps = gaussian_like(tape.val(mean).shape, *seed);
        return tape.add(mean, tape.mul_const(std_dev, eps));
    }

    NodeId conv(Tape& tape, const Conv& c, NodeId x) const {
        return tape.conv2d(x, c.w, c.b, c.stride, c.pad);
    }

    NodeId res(Tape& tape, const Res& r, NodeId x, const Tensor& temb) const {
        NodeId h = tape.group_norm(x, kGroups);
        h = tape.silu(h);
        h = conv(tape, r.c1, h);
        h = tape.add_channel_bias(h, lin_apply(r.emb, temb));
        h = tape.group_norm(h, kGroups);
        h = tape.silu(h);
        h = conv(tape, r.c2, h);
        NodeId s = r.has_skip ? conv(tape, r.skip, x) : x;
        return tape.add(h, s);
    }

    NodeId attn(Tape& tape, const Attn& a, NodeId x, NodeId cond) const {
        const Tensor& xv = tape.val(x);
        const int n = xv.dim(0), hh = xv.dim(1), ww = xv.dim(2), c = xv.dim(3);
        NodeId tokens = tape.reshape(tape.group_norm(x, kGroups), {n, hh * ww, c});
        NodeId q = tape.linear(tokens, a.q.w, a.q.b);
        NodeId km = tape.linear(cond, a.k.w, a.k.b);  // {77,c}
        NodeId vm = tape.linear(cond, a.v.w, a.v.b);
        NodeId scores = tape.scale(tape.matmul_nt(q, km), 1.0 / std::sqrt(static_cast<double>(c)));
        NodeId weights = tape.softmax_last(scores);      // {n,hw,77}
        NodeId mixed = tape.matmul_nn(weights, vm);      // {n,hw,c}
        NodeId out = tape.linear(mixed, a.o.w, a.o.b);
        return tape.add(x, tape.reshape(out, {n, hh, ww, c}));
    }

    NodeId stage(Tape& tape, const Stage& s, NodeId x, const Tensor& temb, NodeId cond) const {
        return attn(tape, s.attn, res(tape, s.res, x, temb), cond);
    }

    // --- weight construction -------------------------------------------------

    Tensor randn(std::vector<int> shape, double stddev, Rng& rng) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = rng.gaussian() * stddev;
        return t;
    }

    Conv make_conv(int k, int ci, int co, int stride, int pad, Rng& rng) {
        Conv c;
        c.w = randn({k, k, ci, co}, std::sqrt(2.0 / (k * k * ci)), rng);
        c.b = Tensor({co});
        c.stride = stride;
        c.pad = pad;
        return c;
    }

    Lin make_lin(int in, int out, double stddev, Rng& rng) {
        Lin l;
        l.w = randn({in, out}, stddev, rng);
        l.b = Tensor({out});
        return l;
    }

    Res make_res(int in, int out, int temb, Rng& rng) {
        Res r;
        r.c1 = make_conv(3, in, out, 1, 1, rng);
        r.c2 = make_conv(3, out, out, 1, 1, rng);
        r.emb = make_lin(temb, out, std::sqrt(2.0 / temb), rng);
        r.has_skip = in != out;
        if (r.has_skip) r.skip = make_conv(1, in, out, 1, 0, rng);
        return r;
    }

    Attn make_attn(int c, Rng& rng) {
        Attn a;
        double s = 1.0 / std::sqrt(static_cast<double>(c));
        double se = 1.0 / std::sqrt(static_cast<double>(cfg_.d_emb));
        a.q = make_lin(c, c, s, rng);
        a.k = make_lin(cfg_.d_emb, c, se, rng);
        a.v = make_lin(cfg_.d_emb, c, se, rng);
        a.o = make_lin(c, c, s, rng);
        return a;
    }

    Stage make_stage(int in, int out, int temb, Rng& rng) {
        return Stage{make_res(in, out, temb, rng), make_attn(out, rng)};
    }

    void init_weights() {
        Rng rng(cfg_.seed);
        auto uw = cfg_.up_widths();                 // {80,80,40,20} at scale 16
        const int w_lo = uw[2], w_hi = uw[0];      // 40, 80
        const int temb = w_hi;
        const int e1 = std::max(4, 128 / cfg_.width_scale);
        const int e2 = std::max(4, 256 / cfg_.width_scale);
        const int cl = cfg_.latent_channels;

        enc1_ = make_conv(3, 3, e1, 1, 1, rng);
        enc2_ = make_conv(3, e1, e2, 2, 1, rng);
        enc3_ = make_conv(3, e2, e2, 2, 1, rng);
        enc4_ = make_conv(3, e2, e2, 2, 1, rng);
        enc_out_ = make_conv(1, e2, 2 * cl, 1, 0, rng);

        temb1_ = make_lin(kSinDim, temb, std::sqrt(2.0 / kSinDim), rng);
        temb2_ = make_lin(temb, temb, std::sqrt(2.0 / temb), rng);

        conv_in_ = make_conv(3, cl, w_lo, 1, 1, rng);
        down1_ = make_stage(w_lo, w_lo, temb, rng);
        down1_ds_ = make_conv(3, w_lo, w_lo, 2, 1, rng);
        down2_ = make_stage(w_lo, w_hi, temb, rng);
        down2_ds_ = make_conv(3, w_hi, w_hi, 2, 1, rng);
        mid1_ = make_res(w_hi, w_hi, temb, rng);
        mid_attn_ = make_attn(w_hi, rng);
        mid2_ = make_res(w_hi, w_hi, temb, rng);

        up1_ = make_stage(w_hi + w_hi, uw[0], temb, rng);
        up1_us_ = make_conv(3, uw[0], uw[0], 1, 1, rng);
        up2_ = make_stage(uw[0] + w_hi, uw[1], temb, rng);
        up2_us_ = make_conv(3, uw[1], uw[1], 1, 1, rng);
        up3_ = make_stage(uw[1] + w_lo, uw[2], temb, rng);
        up4_ = make_stage(uw[2] + w_lo, uw[3], temb, rng);
        conv_out_ = make_conv(3, uw[3], cl, 1, 1, rng);

        tok_emb_ = randn({kVocab, cfg_.d_emb}, 1.0, rng);
        pos_emb_ = randn({kTokens, cfg_.d_emb}, 1.0, rng);
    }

    template <typename F>
    void for_each_weight(F&& fn) const {
        auto do_conv = [&](const Conv& c) {
            fn(c.w);
            fn(c.b);
        };
        auto do_lin = [&](const Lin& l) {
            fn(l.w);
            fn(l.b);
        };
        auto do_res = [&](const Res& r) {
            do_conv(r.c1);
            do_conv(r.c2);
            do_lin(r.emb);
            if (r.has_skip) do_conv(r.skip);
        };
        auto do_attn = [&](const Attn& a) {
            do_lin(a.q);
            do_lin(a.k);
            do_lin(a.v);
            do_lin(a.o);
        };
        auto do_stage = [&](const Stage& s) {
            do_res(s.res);
            do_attn(s.attn);
        };
        do_conv(enc1_);
        do_conv(enc2_);
        do_conv(enc3_);
        do_conv(enc4_);
        do_conv(enc_out_);
        do_lin(temb1_);
        do_lin(temb2_);
        do_conv(conv_in_);
        do_stage(down1_);
        do_conv(down1_ds_);
        do_stage(down2_);
        do_conv(down2_ds_);
        do_res(mid1_);
        do_attn(mid_attn_);
        do_res(mid2_);
        do_stage(up1_);
        do_conv(up1_us_);
        do_stage(up2_);
        do_conv(up2_us_);
        do_stage(up3_);
        do_stage(up4_);
        do_conv(conv_out_);
        fn(tok_emb_);
        fn(pos_emb_);
    }

    BackboneConfig cfg_;
    NoiseSchedule sched_;
    Conv enc1_, enc2_, enc3_, enc4_, enc_out_;
    Lin temb1_, temb2_;
    Conv conv_in_;
    Stage down1_, down2_;
    Conv down1_ds_, down2_ds_;
    Res mid1_, mid2_;
    Attn mid_attn_;
    Stage up1_, up2_, up3_, up4_;
    Conv up1_us_, up2_us_;
    Conv conv_out_;
    Tensor tok_emb_, pos_emb_;
};

}  // namespace

std::unique_ptr<Backbone> Backbone::load(const BackboneConfig& cfg) {
    if (cfg.model_id == "toy" || cfg.model_id.rfind("toy-", 0) == 0)
        return std::make_unique<ToyBackbone>(cfg);
    throw ConfigError("backbone '" + cfg.model_id +
                      "': loading pretrained diffusion weights is not supported in this build; "
                      "use model_id 'toy' (the config remains usable for shape arithmetic)");
}

LatentImage encode_to_latent(const Backbone& bb, const ImageF& image,
                             std::optional<uint64_t> sample_seed) {
    ad::Tape tape;
    ad::NodeId img = tape.input(image_tensor(image), false);
    ad::NodeId z = sample_seed ? bb.encode_sampled(tape, img, *sample_seed) : bb.encode(tape, img);
    const ad::Tensor& zv = tape.val(z);
    LatentImage out;
    out.data = ad::Tensor({zv.dim(1), zv.dim(2), zv.dim(3)});
    out.data.data = zv.data;
    return out;
}

BackboneFeatures denoise_capture(const Backbone& bb, const LatentImage& z_t, int t,
                                 const TextEmbedding& cond) {
    if (z_t.data.ndim() != 3) throw ShapeError("denoise_capture: latent must be {hl,wl,c}");
    ad::Tape tape;
    ad::Tensor z4({1, z_t.data.dim(0), z_t.data.dim(1), z_t.data.dim(2)});
    z4.data = z_t.data.data;
    ad::NodeId zn = tape.input(std::move(z4), false);
    ad::NodeId cn = tape.input(cond.matrix, false);
    DenoiseGraph g = bb.denoise(tape, zn, t, cn);

    auto strip_batch = [&](ad::NodeId id) {
        const ad::Tensor& v = tape.val(id);
        ad::Tensor out({v.dim(1), v.dim(2), v.dim(3)});
        out.data = v.data;
        return out;
    };
    BackboneFeatures f;
    f.t = t;
    for (int i = 0; i < 4; ++i) f.f_u[static_cast<size_t>(i)] = strip_batch(g.up[static_cast<size_t>(i)]);
    for (ad::NodeId d : g.down) f.f_d.push_back(strip_batch(d));
    f.predicted_noise = strip_batch(g.eps_hat);
    return f;
}

}  // namespace diffret
