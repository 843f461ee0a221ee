#include <doctest.h>

#include <cmath>
#include <string>

#include "bbg/autodiff.hpp"
#include "bbg/models.hpp"
#include "bbg/ops.hpp"
#include "helpers.hpp"

using namespace bbg;
using testing::error_code;
using testing::random_tensor;

namespace {

ArchConfig small_arch() {
  ArchConfig a;
  a.e_mlp_width = 32;
  a.d_mlp_width = 32;
  a.latent.dim = 16;
  a.latent.groups = 4;
  return a;
}

Tensor images(const ArchConfig& a, std::size_t batch, std::size_t res,
              std::uint64_t seed) {
  return random_tensor({batch, a.channels, res, res}, seed);
}

const BindOptions kFrozenTrain{false, NormMode::kTrain, false};

Tensor encode_z(ParamTree& e, const ArchConfig& a, const Tensor& x, Rng* rng) {
  Tape t;
  Binder b(t, e, kFrozenTrain);
  return encode(b, t.constant(x), a, rng).z.value();
}

}  // namespace

TEST_CASE("gaussian prior moments") {
  LatentSpec s;
  s.dim = 8;
  s.groups = 1;
  Rng rng(123);
  const std::size_t n = 100000;
  Tensor z = sample_prior(s, n, rng);
  for (std::size_t c = 0; c < s.dim; ++c) {
    double m = 0, q = 0;
    for (std::size_t i = 0; i < n; ++i) m += z[i * s.dim + c];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) q += (z[i * s.dim + c] - m) * (z[i * s.dim + c] - m);
    q /= n;
    CHECK(std::abs(m) < 0.02);
    CHECK(std::abs(q - 1.0) < 0.03);
  }
}

TEST_CASE("uniform prior stays inside the open interval") {
  LatentSpec s;
  s.kind = PriorKind::kUniform;
  Rng rng(9);
  Tensor z = sample_prior(s, 5000, rng);
  double lo = 1, hi = -1;
  for (double v : z.data()) {
    CHECK((v > -1.0 && v < 1.0));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo < -0.99);
  CHECK(hi > 0.99);
}

TEST_CASE("prior draws are reproducible") {
  LatentSpec s;
  Rng a(77), b(77), c(78);
  Tensor za = sample_prior(s, 4, a), zb = sample_prior(s, 4, b), zc = sample_prior(s, 4, c);
  CHECK(za == zb);
  CHECK(!(za == zc));
}

TEST_CASE("latent spec validation") {
  LatentSpec s;
  s.dim = 10;
  s.groups = 4;
  CHECK(error_code([&] { s.validate(); }) == ErrorCode::kInvalidArgument);
  ArchConfig a = small_arch();
  a.latent.groups = 8;  // more groups than injection points
  a.latent.dim = 16;
  CHECK(error_code([&] { a.validate(); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("stochastic encode with collapsed sigma returns mu") {
  ArchConfig a = small_arch();
  Rng rng(1);
  ParamTree e = init_encoder(a, rng);
  // Zero the sigma_hat half of the output layer and pin its bias to -20.
  Param& w = e.at("head.out.w");
  Param& b = e.at("head.out.b");
  const std::size_t dim = a.latent.dim, cols = w.value.dim(1);
  REQUIRE(cols == 2 * dim);
  for (std::size_t r = 0; r < w.value.dim(0); ++r)
    for (std::size_t c = dim; c < cols; ++c) w.value[r * cols + c] = 0.0;
  for (std::size_t c = dim; c < cols; ++c) b.value[c] = -20.0;

  Tape t;
  Binder bind(t, e, kFrozenTrain);
  Rng draw(5);
  EncoderOutput out = encode(bind, t.constant(images(a, 3, a.e_resolution, 2)), a, &draw);
  for (double s : out.sigma.value().data()) {
    CHECK(s > 0.0);
    CHECK(s == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
  }
  CHECK(max_abs_diff(out.z.value(), out.mu.value()) < 1e-6);
}

TEST_CASE("stochastic encode draws exactly B*dim normals") {
  ArchConfig a = small_arch();
  Rng init(1);
  ParamTree e = init_encoder(a, init);
  Tensor x = images(a, 3, a.e_resolution, 3);
  Rng used(42), mirror(42);
  encode_z(e, a, x, &used);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < 3 * a.latent.dim; ++i) normal(mirror);
  CHECK(bool(used == mirror));
}

TEST_CASE("stochastic encode determinism") {
  ArchConfig a = small_arch();
  Rng init(1);
  ParamTree e = init_encoder(a, init);
  Tensor x = images(a, 2, a.e_resolution, 4);
  Rng r1(10), r2(10), r3(11);
  Tensor z1 = encode_z(e, a, x, &r1), z2 = encode_z(e, a, x, &r2), z3 = encode_z(e, a, x, &r3);
  CHECK(z1 == z2);
  CHECK(!(z1 == z3));
}

TEST_CASE("stochastic encode sample statistics") {
  ArchConfig a = small_arch();
  Rng init(2);
  ParamTree e = init_encoder(a, init);
  const std::size_t n = 10000, dim = a.latent.dim;
  // The same image repeated, so every row shares mu and sigma.
  Tensor one = images(a, 1, a.e_resolution, 6);
  Tensor x({n, a.channels, a.e_resolution, a.e_resolution});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = one[i % one.size()];
  Tape t;
  Binder b(t, e, kFrozenTrain);
  Rng draw(8);
  EncoderOutput out = encode(b, t.constant(x), a, &draw);
  const Tensor& z = out.z.value();
  const Tensor& mu = out.mu.value();
  const Tensor& sigma = out.sigma.value();
  for (std::size_t c = 0; c < dim; ++c) {
    double m = 0, q = 0;
    for (std::size_t i = 0; i < n; ++i) m += z[i * dim + c];
    m /= n;
    for (std::size_t i = 0; i < n; ++i) q += (z[i * dim + c] - m) * (z[i * dim + c] - m);
    const double sd = std::sqrt(q / (n - 1));
    CHECK(std::abs(m - mu[c]) < 3.0 * sigma[c] / std::sqrt(double(n)));
    CHECK(std::abs(sd - sigma[c]) < 0.05 * sigma[c]);
  }
}

TEST_CASE("deterministic modes are pure") {
  for (EncoderMode mode : {EncoderMode::kDeterministic, EncoderMode::kTanhDeterministic}) {
    ArchConfig a = small_arch();
    a.encoder_mode = mode;
    Rng init(3);
    ParamTree e = init_encoder(a, init);
    CHECK(e.at("head.out.w").value.dim(1) == a.latent.dim);
    Tensor x = images(a, 4, a.e_resolution, 7);
    Rng r(5);
    const Rng before = r;
    Tensor z1 = encode_z(e, a, x, &r);
    CHECK(bool(r == before));
    Tensor z2 = encode_z(e, a, x, nullptr);
    CHECK(z1 == z2);
    if (mode == EncoderMode::kTanhDeterministic)
      for (double v : z1.data()) CHECK((v > -1.0 && v < 1.0));
  }
}

TEST_CASE("tanh encoder saturating inputs stay in range") {
  ArchConfig a = small_arch();
  a.encoder_mode = EncoderMode::kTanhDeterministic;
  Rng init(3);
  ParamTree e = init_encoder(a, init);
  for (auto& v : e.at("head.out.b").value.data()) v = 5.0;
  Tensor z = encode_z(e, a, images(a, 2, a.e_resolution, 1), nullptr);
  for (double v : z.data()) CHECK((v > -1.0 && v < 1.0));
}

TEST_CASE("encoder rejects the wrong resolution") {
  ArchConfig a = small_arch();
  Rng init(3);
  ParamTree e = init_encoder(a, init);
  CHECK(error_code([&] { encode_z(e, a, images(a, 2, 2 * a.e_resolution, 1), nullptr); }) ==
        ErrorCode::kShapeMismatch);
}

TEST_CASE("generator output range and shape") {
  for (PriorKind kind : {PriorKind::kGaussian, PriorKind::kUniform}) {
    ArchConfig a = small_arch();
    a.latent.kind = kind;
    Rng rng(4);
    ParamTree g = init_generator(a, rng);
    Tape t;
    Binder b(t, g, kFrozenTrain);
    Tensor x = generate(b, t.constant(sample_prior(a.latent, 16, rng)), a).value();
    CHECK(x.shape() == Shape{16, a.channels, a.g_resolution, a.g_resolution});
    for (double v : x.data()) CHECK((v > -1.0 && v < 1.0));
  }
}

TEST_CASE("generator latent injection") {
  ArchConfig a = small_arch();
  Rng rng(4);
  ParamTree g = init_generator(a, rng);
  const std::size_t gs = a.latent.group_size();
  // Stem takes slice 0; each of the next stages widens by one slice.
  CHECK(g.at("stem.w").value.dim(0) == gs);
  const std::size_t up2_in = g.at("up2.deconv.w").value.dim(0);
  const std::size_t up1_out = g.at("up1.deconv.w").value.dim(1);
  CHECK(up2_in == up1_out + gs);

  // Changing only the last slice changes the image.
  Tensor z = sample_prior(a.latent, 4, rng), z2 = z;
  for (std::size_t r = 0; r < 4; ++r) z2[r * a.latent.dim + a.latent.dim - 1] += 1.0;
  auto run = [&](const Tensor& zz) {
    Tape t;
    Binder b(t, g, kFrozenTrain);
    return generate(b, t.constant(zz), a).value();
  };
  CHECK(max_abs_diff(run(z), run(z2)) > 1e-6);

  CHECK(error_code([&] { run(Tensor({4, a.latent.dim + 1})); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("one latent group feeds everything to the stem") {
  ArchConfig a = small_arch();
  a.latent.groups = 1;
  Rng rng(4);
  ParamTree g = init_generator(a, rng);
  CHECK(g.at("stem.w").value.dim(0) == a.latent.dim);
  CHECK(g.at("up2.deconv.w").value.dim(0) == g.at("up1.deconv.w").value.dim(1));
  Tape t;
  Binder b(t, g, kFrozenTrain);
  Tensor x = generate(b, t.constant(sample_prior(a.latent, 2, rng)), a).value();
  CHECK(x.all_finite());
}

TEST_CASE("generator width multiplier scales conv parameters quadratically") {
  auto conv_params = [](std::size_t width) {
    ArchConfig a;
    a.latent.groups = 1;  // no injected channels, so stages scale cleanly
    a.g_width = width;
    Rng rng(1);
    ParamTree g = init_generator(a, rng);
    std::size_t n = 0;
    for (std::size_t i = 2; i <= a.g_upsamples; ++i)
      n += g.at("up" + std::to_string(i) + ".deconv.w").value.size();
    return double(n);
  };
  CHECK(conv_params(8) / conv_params(24) == doctest::Approx(1.0 / 9.0).epsilon(1e-12));

  // Whole generator with the default grouping: close to 1/9, a bit above
  // because of the fixed-width latent inputs.
  auto total = [](std::size_t width) {
    ArchConfig a;
    a.g_width = width;
    Rng rng(1);
    return double(init_generator(a, rng).parameter_count());
  };
  const double r = total(8) / total(24);
  CHECK(r > 1.0 / 9.0);
  CHECK(r < 0.2);
}

TEST_CASE("joint input is F feature plus H output") {
  ArchConfig a = small_arch();
  Rng rng(5);
  ParamTree d = init_discriminator(a, rng);
  Tape t;
  Binder b(t, d, kFrozenTrain);
  Var x = t.constant(images(a, 2, a.d_resolution(), 1));
  Var f = discriminator_f(b, x, a);
  CHECK(f.shape() == Shape{2, 4 * a.d_width});
  CHECK(joint_input_dim(a) == f.shape()[1] + a.d_mlp_width);
  CHECK(d.at("j.in.w").value.dim(0) == joint_input_dim(a));
  CHECK(d.at("h.in.w").value.dim(0) == a.latent.dim);

  ScoreTriple s = discriminate(b, x, t.constant(sample_prior(a.latent, 2, rng)), a);
  CHECK(s.s_x.shape() == Shape{2});
  CHECK(s.s_z.shape() == Shape{2});
  CHECK(s.s_xz.shape() == Shape{2});
}

TEST_CASE("discriminator shape errors") {
  ArchConfig a = small_arch();
  Rng rng(5);
  ParamTree d = init_discriminator(a, rng);
  Tape t;
  Binder b(t, d, kFrozenTrain);
  Var z = t.constant(sample_prior(a.latent, 2, rng));
  CHECK(error_code([&] { discriminate(b, t.constant(images(a, 2, 8, 1)), z, a); }) ==
        ErrorCode::kShapeMismatch);
  Var x = t.constant(images(a, 2, a.d_resolution(), 1));
  CHECK(error_code([&] { discriminate(b, x, t.constant(Tensor({2, 3})), a); }) ==
        ErrorCode::kShapeMismatch);
  CHECK(error_code([&] { discriminate(b, x, Var(), a); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("no-encoder discriminator has only the image branch") {
  ArchConfig a = small_arch();
  a.use_encoder = false;
  Rng rng(5);
  ParamTree d = init_discriminator(a, rng);
  for (const auto& n : d.names()) CHECK(n.rfind("f.", 0) == 0);
  Tape t;
  Binder b(t, d, kFrozenTrain);
  ScoreTriple s = discriminate(b, t.constant(images(a, 3, a.d_resolution(), 1)), Var(), a);
  CHECK(s.s_x.valid());
  CHECK(!s.s_z.valid());
  CHECK(!s.s_xz.valid());
}

TEST_CASE("zero discriminator scores zero") {
  ArchConfig a = small_arch();
  Rng rng(5);
  ParamTree d = init_discriminator(a, rng);
  for (auto& [name, p] : d) p.value.fill(0.0);
  Tape t;
  Binder b(t, d, kFrozenTrain);
  ScoreTriple s = discriminate(b, t.constant(images(a, 3, a.d_resolution(), 2)),
                               t.constant(sample_prior(a.latent, 3, rng)), a);
  for (Var v : {s.s_x, s.s_z, s.s_xz})
    for (double e : v.value().data()) CHECK(e == 0.0);
}

TEST_CASE("discriminator scores are differentiable") {
  ArchConfig a = small_arch();
  Rng rng(6);
  ParamTree d = init_discriminator(a, rng);
  Tensor x0 = images(a, 2, a.d_resolution(), 3);
  Tensor z0 = sample_prior(a.latent, 2, rng);

  auto total = [&](Tape&, Binder& b, Var x, Var z) {
    ScoreTriple s = discriminate(b, x, z, a);
    return mean(add(add(s.s_x, s.s_z), s.s_xz));
  };
  auto rel = [](double an, double fd) {
    return std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
  };
  const double h = 1e-4;

  // Gradient with respect to the inputs.
  {
    Tape t;
    Binder b(t, d, kFrozenTrain);
    Var x = t.leaf(x0, true), z = t.leaf(z0, true);
    Gradients g = t.backward(total(t, b, x, z));
    auto f = [&](const Tensor& xx, const Tensor& zz) {
      Tape t2;
      Binder b2(t2, d, kFrozenTrain);
      return total(t2, b2, t2.constant(xx), t2.constant(zz)).value().item();
    };
    double worst = 0;
    for (std::size_t i = 0; i < x0.size(); i += 7) {
      Tensor p = x0, m = x0;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, rel(g.at(x)[i], (f(p, z0) - f(m, z0)) / (2 * h)));
    }
    for (std::size_t i = 0; i < z0.size(); ++i) {
      Tensor p = z0, m = z0;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, rel(g.at(z)[i], (f(x0, p) - f(x0, m)) / (2 * h)));
    }
    CHECK(worst < 1e-3);
  }

  // Gradient with respect to parameters that are not spectrally normalized.
  for (const std::string name : {"j.in.b", "h.res0.a.b", "f.conv1.b", "f.proj.b"}) {
    CAPTURE(name);
    Tape t;
    Binder b(t, d, BindOptions{true, NormMode::kTrain, false});
    Gradients g = t.backward(total(t, b, t.constant(x0), t.constant(z0)));
    const Tensor an = b.gradients(g).at(name);
    auto f = [&](const Tensor& v) {
      ParamTree copy = d;
      copy.at(name).value = v;
      Tape t2;
      Binder b2(t2, copy, kFrozenTrain);
      return total(t2, b2, t2.constant(x0), t2.constant(z0)).value().item();
    };
    const Tensor v0 = d.at(name).value;
    double worst = 0;
    for (std::size_t i = 0; i < v0.size(); ++i) {
      Tensor p = v0, m = v0;
      p[i] += h;
      m[i] -= h;
      worst = std::max(worst, rel(an[i], (f(p) - f(m)) / (2 * h)));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("spectral norm flags and EMA shadows by network") {
  ArchConfig a = small_arch();
  Rng rng(7);
  ParamTree e = init_encoder(a, rng), g = init_generator(a, rng), d = init_discriminator(a, rng);
  for (const auto& [name, p] : e) {
    CAPTURE(name);
    CHECK(!p.spectral_norm);
    CHECK(p.ema.has_value() == p.trainable);
  }
  for (const auto& [name, p] : g) {
    CAPTURE(name);
    CHECK(p.spectral_norm == (p.trainable && p.value.rank() >= 2));
    CHECK(p.ema.has_value() == p.trainable);
  }
  for (const auto& [name, p] : d) {
    CAPTURE(name);
    CHECK(p.spectral_norm == (p.trainable && p.value.rank() >= 2));
    CHECK(!p.ema.has_value());
  }
  for (const auto& [name, p] : e)
    if (p.ema) CHECK(p.ema->shape() == p.value.shape());
}

TEST_CASE("eval-mode binding leaves state untouched") {
  ArchConfig a = small_arch();
  Rng rng(8);
  ParamTree g = init_generator(a, rng);
  {
    Tape t;
    Binder b(t, g, BindOptions{false, NormMode::kTrain, true});
    generate(b, t.constant(sample_prior(a.latent, 4, rng)), a);
  }
  const ParamTree snapshot = g;
  Tape t;
  Binder b(t, g, BindOptions{false, NormMode::kEval, true});
  generate(b, t.constant(sample_prior(a.latent, 4, rng)), a);
  for (const auto& [name, p] : g) {
    CAPTURE(name);
    CHECK(p.value == snapshot.at(name).value);
    CHECK(p.sn_u == snapshot.at(name).sn_u);
  }
}

TEST_CASE("images are area-downsampled for the discriminator") {
  ArchConfig a = small_arch();
  a.e_resolution = 32;
  Tape t;
  Tensor x = images(a, 1, 32, 9);
  Tensor y = to_d_resolution(t.constant(x), a).value();
  REQUIRE(y.shape() == Shape{1, 1, 16, 16});
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      const double want = (x[(2 * r) * 32 + 2 * c] + x[(2 * r) * 32 + 2 * c + 1] +
                           x[(2 * r + 1) * 32 + 2 * c] + x[(2 * r + 1) * 32 + 2 * c + 1]) /
                          4.0;
      CHECK(y[r * 16 + c] == doctest::Approx(want).epsilon(1e-12));
    }
}
