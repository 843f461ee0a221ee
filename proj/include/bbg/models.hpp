#pragma once

#include <cstddef>
#include <string>

#include "bbg/params.hpp"

namespace bbg {

enum class PriorKind { kGaussian, kUniform };

struct LatentSpec {
  PriorKind kind = PriorKind::kGaussian;
  std::size_t dim = 64;
  std::size_t groups = 4;

  std::size_t group_size() const { return dim / groups; }
  void validate() const;
};

enum class EncoderMode { kStochastic, kDeterministic, kTanhDeterministic };

// Network shapes. D runs at the generator's output resolution; real images
// are area-downsampled to it when the encoder sees a larger input.
struct ArchConfig {
  std::size_t channels = 1;
  std::size_t e_resolution = 16;
  std::size_t g_resolution = 16;

  std::size_t e_width = 16;
  std::size_t e_mlp_width = 128;
  std::size_t e_mlp_blocks = 2;

  std::size_t g_width = 24;
  std::size_t g_upsamples = 3;

  std::size_t d_width = 16;
  std::size_t d_mlp_width = 256;
  std::size_t d_mlp_blocks = 2;

  LatentSpec latent;
  EncoderMode encoder_mode = EncoderMode::kStochastic;
  bool use_encoder = true;

  std::size_t d_resolution() const { return g_resolution; }
  std::size_t feature_dim() const { return 4 * e_width; }
  void validate() const;
};

Tensor sample_prior(const LatentSpec& spec, std::size_t batch, Rng& rng);

ParamTree init_encoder(const ArchConfig& arch, Rng& rng);
ParamTree init_generator(const ArchConfig& arch, Rng& rng);
ParamTree init_discriminator(const ArchConfig& arch, Rng& rng);

struct EncoderOutput {
  Var mu;
  Var sigma_hat;  // stochastic mode only
  Var sigma;      // stochastic mode only
  Var z;
  EncoderMode mode = EncoderMode::kStochastic;
};

// Global-average-pooled trunk output [B x 4*e_width].
Var encoder_features(Binder& e, Var x, const ArchConfig& arch);

// With rng == nullptr a stochastic encoder returns z = mu (no sampling).
// Otherwise it draws exactly B*dim standard normals.
EncoderOutput encode(Binder& e, Var x, const ArchConfig& arch, Rng* rng);

// z[B x dim] -> images [B x C x g_res x g_res] in (-1, 1). Slice i of z
// (dim/groups wide) enters stage i; slice 0 feeds the stem.
Var generate(Binder& g, Var z, const ArchConfig& arch);

struct ScoreTriple {
  Var s_x;   // [B]
  Var s_z;   // [B], invalid without an encoder
  Var s_xz;  // [B], invalid without an encoder
};

// Pooled F(x) feature, used by J. Exposed for structural tests.
Var discriminator_f(Binder& d, Var x, const ArchConfig& arch);

// z may be invalid only when arch.use_encoder is false (plain GAN).
ScoreTriple discriminate(Binder& d, Var x, Var z, const ArchConfig& arch);

// Input size of J for a given architecture (F feature + H output).
std::size_t joint_input_dim(const ArchConfig& arch);

// Area-downsamples encoder-resolution images to D's resolution.
Var to_d_resolution(Var x, const ArchConfig& arch);

}  // namespace bbg
