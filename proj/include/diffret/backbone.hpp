#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffret/common.hpp"
#include "diffret/image.hpp"
#include "diffret/tensor.hpp"

namespace diffret {

// Per-timestep alpha values and their cumulative products.
struct NoiseSchedule {
    int total_steps = 0;
    std::vector<double> alphas;      // length T, in (0,1]
    std::vector<double> alpha_bars;  // running product of alphas
};

struct ScheduleSpec {
    std::string family = "linear";  // linear | scaled_linear | identity
    int total_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

NoiseSchedule build_noise_schedule(const ScheduleSpec& spec);

struct BackboneConfig {
    std::string model_id = "toy";
    int total_steps = 1000;
    std::string schedule = "linear";
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int d_emb = 64;
    int latent_channels = 4;
    int image_side = 64;
    uint64_t seed = 1234;
    // divides the reference upsampling widths {1280, 1280, 640, 320}
    int width_scale = 16;

    static BackboneConfig toy(uint64_t seed = 1234);
    static BackboneConfig reference(const std::string& version = "sd-v2.1");

    ScheduleSpec schedule_spec() const {
        return ScheduleSpec{schedule, total_steps, beta_start, beta_end};
    }
    std::array<int, 4> up_widths() const;
    std::string serialize() const;  // canonical key=value text, one key per line
    void validate() const;
};

struct LatentImage {
    ad::Tensor data;  // {h/8, w/8, d_lat}
    std::string source_id;
};

struct TextEmbedding {
    ad::Tensor matrix;  // {77, d_emb}
    bool truncated = false;
    std::string warning;
};

struct BackboneFeatures {
    std::array<ad::Tensor, 4> f_u;  // upsampling-block activations, block order 1..4
    std::vector<ad::Tensor> f_d;    // downsampling-side activations (optional use)
    int t = 0;
    ad::Tensor predicted_noise;
};

// Node handles of one denoising pass with activation capture.
struct DenoiseGraph {
    std::array<ad::NodeId, 4> up{};
    std::vector<ad::NodeId> down;
    ad::NodeId eps_hat = -1;
};

// Uniform interface over a frozen text-conditioned latent denoiser. Graph
// methods build onto a caller-owned tape so gradients can flow to image
// pixels and conditioning; weights stay outside the tape and are never
// updated.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual const BackboneConfig& config() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;
    virtual uint64_t weight_checksum() const = 0;
    virtual TextEmbedding embed_text(const std::string& prompt) const = 0;

    // image {1,h,w,3} -> posterior-mean latent {1,h/8,w/8,d_lat}
    virtual ad::NodeId encode(ad::Tape& tape, ad::NodeId image) const = 0;
    // reparameterized sample, deterministic under the given seed
    virtual ad::NodeId encode_sampled(ad::Tape& tape, ad::NodeId image, uint64_t seed) const = 0;
    // single denoising pass over {n,hl,wl,d_lat} with capture
    virtual DenoiseGraph denoise(ad::Tape& tape, ad::NodeId z_t, int t, ad::NodeId cond) const = 0;

    static std::unique_ptr<Backbone> load(const BackboneConfig& cfg);
};

// value-level wrappers over the graph interface
ad::Tensor image_tensor(const ImageF& img);  // {1,h,w,3}
LatentImage encode_to_latent(const Backbone& bb, const ImageF& image,
                             std::optional<uint64_t> sample_seed = std::nullopt);
LatentImage forward_noise(const LatentImage& z0, int t, const ad::Tensor& eps,
                          const NoiseSchedule& schedule);
BackboneFeatures denoise_capture(const Backbone& bb, const LatentImage& z_t, int t,
                                 const TextEmbedding& cond);
ad::Tensor gaussian_like(const std::vector<int>& shape, uint64_t seed);

// shape arithmetic valid for any config (no weights needed); h, w must be
// divisible by 32 so the two internal downsamples stay integral
std::array<std::array<int, 3>, 4> captured_shapes(const BackboneConfig& cfg, int h, int w);
int feature_dim(const BackboneConfig& cfg, TaskMode task);

}  // namespace diffret
