#include "bbg/models.hpp"

#include <algorithm>
#include <cmath>

#include "bbg/error.hpp"

namespace bbg {
namespace {

constexpr std::size_t kTrunkBlocks = 3;

std::size_t stage_channels(const ArchConfig& a, std::size_t stage) {
  // Stem is stage 0 at 4c; each upsampling stage halves, floored at c.
  return std::max(a.g_width, (4 * a.g_width) >> stage);
}

std::size_t stem_resolution(const ArchConfig& a) {
  return a.g_resolution >> a.g_upsamples;
}

void add_residual_mlp(ParamTree& t, const std::string& name, std::size_t in,
                      std::size_t width, std::size_t blocks, Rng& rng) {
  add_linear(t, name + ".in", in, width, rng);
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::string blk = name + ".res" + std::to_string(i);
    add_linear(t, blk + ".a", width, width, rng);
    add_linear(t, blk + ".b", width, width, rng);
  }
}

Var residual_mlp(Binder& b, const std::string& name, Var x,
                 std::size_t blocks) {
  Var h = linear(b, name + ".in", x);
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::string blk = name + ".res" + std::to_string(i);
    Var r = linear(b, blk + ".a", relu(h));
    r = linear(b, blk + ".b", relu(r));
    h = add(h, r);
  }
  return relu(h);
}

void enable_sn_on_weights(ParamTree& t, Rng& rng) {
  for (const auto& name : t.names()) {
    const Param& p = t.at(name);
    if (p.trainable && p.value.rank() >= 2) t.enable_spectral_norm(name, rng);
  }
}

Var column(Var s) { return reshape(s, {s.shape()[0]}); }

void check_image(Var x, const ArchConfig& a, std::size_t res, const char* who) {
  const Shape& s = x.shape();
  require(s.size() == 4 && s[1] == a.channels && s[2] == res && s[3] == res,
          ErrorCode::kShapeMismatch,
          std::string(who) + ": expected [B x " + std::to_string(a.channels) +
              " x " + std::to_string(res) + " x " + std::to_string(res) +
              "] input, got " + shape_string(s));
}

}  // namespace

void LatentSpec::validate() const {
  require(dim > 0 && groups > 0 && dim % groups == 0,
          ErrorCode::kInvalidArgument,
          "latent dim " + std::to_string(dim) + " not divisible into " +
              std::to_string(groups) + " groups");
}

void ArchConfig::validate() const {
  latent.validate();
  require(channels > 0, ErrorCode::kInvalidArgument, "channels must be > 0");
  require(e_width > 0 && g_width > 0 && d_width > 0,
          ErrorCode::kInvalidArgument, "network widths must be > 0");
  require(g_upsamples >= 1 && g_resolution % (std::size_t{1} << g_upsamples) == 0,
          ErrorCode::kInvalidArgument,
          "g_resolution " + std::to_string(g_resolution) +
              " is not divisible by 2^g_upsamples");
  require(latent.groups <= g_upsamples + 1, ErrorCode::kInvalidArgument,
          "latent groups exceed generator injection points");
  require(e_resolution >= g_resolution && e_resolution % g_resolution == 0,
          ErrorCode::kInvalidArgument,
          "e_resolution must be a multiple of g_resolution");
  require(e_resolution >= 8 && g_resolution >= 8, ErrorCode::kInvalidArgument,
          "resolutions below 8 are not supported");
}

Tensor sample_prior(const LatentSpec& spec, std::size_t batch, Rng& rng) {
  Tensor z({batch, spec.dim});
  if (spec.kind == PriorKind::kGaussian) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : z.data()) v = normal(rng);
  } else {
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (auto& v : z.data()) {
      do {
        v = unif(rng);
      } while (v <= -1.0);
    }
  }
  return z;
}

ParamTree init_encoder(const ArchConfig& a, Rng& rng) {
  a.validate();
  ParamTree t;
  std::size_t in = a.channels;
  for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
    const std::size_t out = a.e_width << std::min<std::size_t>(i, 2);
    const std::string blk = "trunk" + std::to_string(i);
    add_conv(t, blk + ".conv", in, out, 3, rng);
    add_batch_norm(t, blk + ".bn", out, true);
    in = out;
  }
  add_residual_mlp(t, "head", a.feature_dim(), a.e_mlp_width, a.e_mlp_blocks,
                   rng);
  const std::size_t out_dim =
      a.encoder_mode == EncoderMode::kStochastic ? 2 * a.latent.dim
                                                 : a.latent.dim;
  add_linear(t, "head.out", a.e_mlp_width, out_dim, rng);
  t.enable_ema();
  return t;
}

ParamTree init_generator(const ArchConfig& a, Rng& rng) {
  a.validate();
  ParamTree t;
  const std::size_t gs = a.latent.groups == 1 ? a.latent.dim
                                              : a.latent.group_size();
  const std::size_t s0 = stem_resolution(a);
  const std::size_t c0 = stage_channels(a, 0);
  add_linear(t, "stem", gs, c0 * s0 * s0, rng);
  add_batch_norm(t, "stem.bn", c0, true);
  for (std::size_t i = 1; i <= a.g_upsamples; ++i) {
    const std::size_t inject = i < a.latent.groups ? a.latent.group_size() : 0;
    const std::string blk = "up" + std::to_string(i);
    add_deconv(t, blk + ".deconv", stage_channels(a, i - 1) + inject,
               stage_channels(a, i), 4, rng);
    add_batch_norm(t, blk + ".bn", stage_channels(a, i), true);
  }
  add_conv(t, "to_image", stage_channels(a, a.g_upsamples), a.channels, 3, rng);
  enable_sn_on_weights(t, rng);
  t.enable_ema();
  return t;
}

ParamTree init_discriminator(const ArchConfig& a, Rng& rng) {
  a.validate();
  ParamTree t;
  std::size_t in = a.channels;
  for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
    const std::size_t out = a.d_width << std::min<std::size_t>(i, 2);
    add_conv(t, "f.conv" + std::to_string(i), in, out, 3, rng);
    in = out;
  }
  add_linear(t, "f.proj", in, 1, rng);
  if (a.use_encoder) {
    add_residual_mlp(t, "h", a.latent.dim, a.d_mlp_width, a.d_mlp_blocks, rng);
    add_linear(t, "h.proj", a.d_mlp_width, 1, rng);
    add_residual_mlp(t, "j", joint_input_dim(a), a.d_mlp_width, a.d_mlp_blocks,
                     rng);
    add_linear(t, "j.proj", a.d_mlp_width, 1, rng);
  }
  enable_sn_on_weights(t, rng);
  return t;
}

std::size_t joint_input_dim(const ArchConfig& a) {
  return 4 * a.d_width + a.d_mlp_width;
}

Var encoder_features(Binder& e, Var x, const ArchConfig& a) {
  check_image(x, a, a.e_resolution, "encoder");
  Var h = x;
  for (std::size_t i = 0; i < kTrunkBlocks; ++i) {
    const std::string blk = "trunk" + std::to_string(i);
    h = conv(e, blk + ".conv", h, 2, 1);
    h = relu(e.batch_norm(blk + ".bn", h, true));
  }
  return global_avg_pool(h);
}

EncoderOutput encode(Binder& e, Var x, const ArchConfig& a, Rng* rng) {
  Var feat = encoder_features(e, x, a);
  Var head = residual_mlp(e, "head", feat, a.e_mlp_blocks);
  Var out = linear(e, "head.out", head);
  const std::size_t dim = a.latent.dim;
  EncoderOutput r;
  r.mode = a.encoder_mode;
  switch (a.encoder_mode) {
    case EncoderMode::kStochastic: {
      r.mu = slice_cols(out, 0, dim);
      r.sigma_hat = slice_cols(out, dim, dim);
      r.sigma = softplus(r.sigma_hat);
      if (rng == nullptr) {
        r.z = r.mu;
        break;
      }
      Tensor eps({x.shape()[0], dim});
      std::normal_distribution<double> normal(0.0, 1.0);
      for (auto& v : eps.data()) v = normal(*rng);
      r.z = add(r.mu, mul(e.tape().constant(std::move(eps)), r.sigma));
      break;
    }
    case EncoderMode::kDeterministic:
      r.mu = out;
      r.z = out;
      break;
    case EncoderMode::kTanhDeterministic:
      r.mu = out;
      r.z = tanh(out);
      break;
  }
  return r;
}

Var generate(Binder& g, Var z, const ArchConfig& a) {
  const LatentSpec& ls = a.latent;
  require(z.shape().size() == 2 && z.shape()[1] == ls.dim,
          ErrorCode::kShapeMismatch,
          "generate: expected z of width " + std::to_string(ls.dim) +
              ", got " + shape_string(z.shape()));
  const std::size_t batch = z.shape()[0];
  const std::size_t gs = ls.group_size();
  const std::size_t s0 = stem_resolution(a);
  const std::size_t c0 = stage_channels(a, 0);

  Var first = ls.groups == 1 ? z : slice_cols(z, 0, gs);
  Var h = reshape(linear(g, "stem", first), {batch, c0, s0, s0});
  h = relu(g.batch_norm("stem.bn", h, true));
  for (std::size_t i = 1; i <= a.g_upsamples; ++i) {
    if (i < ls.groups) {
      Var slice = slice_cols(z, i * gs, gs);
      h = concat_channels(h, tile_spatial(slice, h.shape()[2], h.shape()[3]));
    }
    const std::string blk = "up" + std::to_string(i);
    h = deconv(g, blk + ".deconv", h, 2, 1);
    h = relu(g.batch_norm(blk + ".bn", h, true));
  }
  return tanh(conv(g, "to_image", h, 1, 1));
}

Var discriminator_f(Binder& d, Var x, const ArchConfig& a) {
  check_image(x, a, a.d_resolution(), "discriminator");
  Var h = x;
  for (std::size_t i = 0; i < kTrunkBlocks; ++i)
    h = relu(conv(d, "f.conv" + std::to_string(i), h, 2, 1));
  return global_avg_pool(h);
}

ScoreTriple discriminate(Binder& d, Var x, Var z, const ArchConfig& a) {
  ScoreTriple s;
  Var f = discriminator_f(d, x, a);
  s.s_x = column(linear(d, "f.proj", f));
  if (!a.use_encoder) return s;
  require(z.valid(), ErrorCode::kInvalidArgument,
          "discriminate: latent input required with an encoder");
  require(z.shape().size() == 2 && z.shape()[1] == a.latent.dim &&
              z.shape()[0] == x.shape()[0],
          ErrorCode::kShapeMismatch,
          "discriminate: latent shape " + shape_string(z.shape()));
  Var h = residual_mlp(d, "h", z, a.d_mlp_blocks);
  s.s_z = column(linear(d, "h.proj", h));
  Var j = residual_mlp(d, "j", concat_cols(f, h), a.d_mlp_blocks);
  s.s_xz = column(linear(d, "j.proj", j));
  return s;
}

Var to_d_resolution(Var x, const ArchConfig& a) {
  return avg_pool(x, a.e_resolution / a.g_resolution);
}

}  // namespace bbg
