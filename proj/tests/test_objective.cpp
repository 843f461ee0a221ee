#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "bbg/autodiff.hpp"
#include "bbg/objective.hpp"
#include "bbg/ops.hpp"
#include "helpers.hpp"

using namespace bbg;
using testing::error_code;
using testing::random_tensor;

namespace {

AblationFlags only(bool x, bool z, bool xz) {
  AblationFlags f;
  f.use_unary_x = x;
  f.use_unary_z = z;
  f.use_joint = xz;
  return f;
}

struct Scores {
  Tensor x, z, xz;
};

Scores random_scores(std::size_t n, std::uint64_t seed) {
  return {random_tensor({n}, seed, -2, 2), random_tensor({n}, seed + 1, -2, 2),
          random_tensor({n}, seed + 2, -2, 2)};
}

struct Leaves {
  ScoreTriple enc, gen;
};

Leaves bind(Tape& t, const Scores& e, const Scores& g) {
  Leaves l;
  l.enc = {t.leaf(e.x, true), t.leaf(e.z, true), t.leaf(e.xz, true)};
  l.gen = {t.leaf(g.x, true), t.leaf(g.z, true), t.leaf(g.xz, true)};
  return l;
}

double h(double t) { return t < 1.0 ? 1.0 - t : 0.0; }

double mean_of(const Tensor& t, double (*f)(double)) {
  double s = 0;
  for (double v : t.data()) s += f(v);
  return s / double(t.size());
}

}  // namespace

TEST_CASE("hinge values") {
  CHECK(hinge(2.0) == 0.0);
  CHECK(hinge(0.0) == 1.0);
  CHECK(hinge(-1.5) == 2.5);
  CHECK(hinge(1.0) == 0.0);
}

TEST_CASE("hinge subgradient at the corner is zero") {
  Tape t;
  Var s = t.leaf(Tensor::from({1}, {1.0}), true);
  Var other = t.leaf(Tensor::from({1}, {0.0}), true);
  ScoreTriple enc{s, Var(), Var()}, gen{other, Var(), Var()};
  AblationFlags f = only(true, false, false);
  f.use_encoder = false;
  Gradients g = t.backward(loss_D(enc, gen, f));
  CHECK(g.at(s)[0] == 0.0);
}

TEST_CASE("per-sample EG loss") {
  const ScoreRow s{0.5, -0.2, 0.1};
  AblationFlags all;
  CHECK(per_sample_loss_EG(s, 1, all) == doctest::Approx(0.4));
  CHECK(per_sample_loss_EG(s, -1, all) == doctest::Approx(-0.4));
  CHECK(per_sample_loss_EG(s, 1, only(true, false, false)) == 0.5);
  CHECK(error_code([&] { per_sample_loss_EG(s, 0, all); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("per-sample D loss") {
  const ScoreRow s{0.5, -0.2, 0.1};
  AblationFlags all;
  CHECK(per_sample_loss_D(s, 1, all) == doctest::Approx(2.6));
  AblationFlags joint;
  joint.hinge_mode = HingeMode::kJoint;
  CHECK(per_sample_loss_D(s, 1, joint) == doctest::Approx(0.6));
  CHECK(per_sample_loss_D({1.0, 1.5, 3.0}, 1, all) == 0.0);
  CHECK(error_code([&] { per_sample_loss_D(s, 2, all); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("EG loss antisymmetry") {
  Tensor r = random_tensor({300}, 4, -5, 5);
  const AblationFlags fl[] = {AblationFlags{}, only(true, false, false), only(false, true, true)};
  for (std::size_t i = 0; i + 2 < r.size(); i += 3) {
    const ScoreRow s{r[i], r[i + 1], r[i + 2]};
    for (const auto& f : fl)
      CHECK(per_sample_loss_EG(s, 1, f) == -per_sample_loss_EG(s, -1, f));
  }
}

TEST_CASE("D loss is non-increasing in y*s") {
  AblationFlags all;
  for (int y : {1, -1}) {
    for (int term = 0; term < 3; ++term) {
      double prev = 1e300;
      for (double v = -3; v <= 3; v += 0.05) {
        ScoreRow s{0.2, -0.4, 0.7};
        double* field = term == 0 ? &s.s_x : term == 1 ? &s.s_z : &s.s_xz;
        *field = y * v;
        const double l = per_sample_loss_D(s, y, all);
        CHECK(l <= prev + 1e-15);
        prev = l;
      }
    }
  }
}

TEST_CASE("flag validation") {
  AblationFlags f;
  f.use_encoder = false;
  CHECK(error_code([&] { f.validate(); }) == ErrorCode::kInvalidArgument);
  f.use_unary_z = false;
  f.use_joint = false;
  CHECK(!error_code([&] { f.validate(); }));
  CHECK(error_code([&] { only(false, false, false).validate(); }) ==
        ErrorCode::kInvalidArgument);
}

TEST_CASE("plain GAN reduces to the reference hinge GAN") {
  // Reference: L_D = E[relu(1 - D(x))] + E[relu(1 + D(G(z)))], L_G = -E[D(G(z))].
  Tensor real = random_tensor({7}, 11, -2, 2), fake = random_tensor({7}, 12, -2, 2);
  double ref_d = 0, ref_g = 0;
  for (double v : real.data()) ref_d += std::max(0.0, 1.0 - v) / 7.0;
  for (double v : fake.data()) ref_d += std::max(0.0, 1.0 + v) / 7.0;
  for (double v : fake.data()) ref_g -= v / 7.0;

  AblationFlags f = only(true, false, false);
  f.use_encoder = false;
  Tape t;
  ScoreTriple enc{t.leaf(real, true), Var(), Var()};
  ScoreTriple gen{t.leaf(fake, true), Var(), Var()};
  CHECK(std::abs(loss_D(enc, gen, f).value().item() - ref_d) < 1e-7);
  // Without an encoder the EG objective sees only generated pairs.
  CHECK(std::abs(loss_EG(ScoreTriple{}, gen, f).value().item() - ref_g) < 1e-7);
  LossReport rep = batch_losses(enc, gen, f);
  CHECK(std::abs(rep.loss_D - ref_d) < 1e-7);
  CHECK(std::abs(rep.gen.x.hinged - mean_of(fake, [](double v) { return h(-v); })) < 1e-7);
  CHECK(std::abs(rep.enc.x.hinged - mean_of(real, [](double v) { return h(v); })) < 1e-7);

  // Term-by-term gradients of the reference.
  Gradients gd = t.backward(loss_D(enc, gen, f));
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(gd.at(enc.s_x)[i] == (real[i] < 1 ? -1.0 / 7 : 0.0));
    CHECK(gd.at(gen.s_x)[i] == (fake[i] > -1 ? 1.0 / 7 : 0.0));
  }
  Gradients gg = t.backward(loss_EG(ScoreTriple{}, gen, f));
  for (std::size_t i = 0; i < 7; ++i) CHECK(gg.at(gen.s_x)[i] == doctest::Approx(-1.0 / 7));
}

TEST_CASE("joint-only objective on a two-sample batch") {
  // Encoder pairs a, b; generator pairs c, d (joint scores only).
  const double a = 0.3, b = 1.4, c = -0.6, d = 0.2;
  Tape t;
  Scores e{Tensor({2}, 9.0), Tensor({2}, 9.0), Tensor::from({2}, {a, b})};
  Scores g{Tensor({2}, 9.0), Tensor({2}, 9.0), Tensor::from({2}, {c, d})};
  Leaves l = bind(t, e, g);
  AblationFlags f = only(false, false, true);
  // L_D = (h(a) + h(b)) / 2 + (h(-c) + h(-d)) / 2
  const double want_d = (0.7 + 0.0) / 2 + (0.4 + 1.2) / 2;
  // L_EG = (a + b) / 2 - (c + d) / 2
  const double want_eg = (a + b) / 2 - (c + d) / 2;
  CHECK(loss_D(l.enc, l.gen, f).value().item() == doctest::Approx(want_d).epsilon(1e-14));
  CHECK(loss_EG(l.enc, l.gen, f).value().item() == doctest::Approx(want_eg).epsilon(1e-14));
  // The joint hinge mode coincides when only one term is active.
  f.hinge_mode = HingeMode::kJoint;
  CHECK(loss_D(l.enc, l.gen, f).value().item() == doctest::Approx(want_d).epsilon(1e-14));
}

TEST_CASE("perfect discriminator has zero D loss") {
  const double delta = 0.25;
  Tape t;
  Scores e{Tensor({5}, 1 + delta), Tensor({5}, 1 + delta), Tensor({5}, 1 + delta)};
  Scores g{Tensor({5}, -1 - delta), Tensor({5}, -1 - delta), Tensor({5}, -1 - delta)};
  Leaves l = bind(t, e, g);
  AblationFlags f;
  CHECK(loss_D(l.enc, l.gen, f).value().item() == 0.0);
  f.hinge_mode = HingeMode::kJoint;
  CHECK(loss_D(l.enc, l.gen, f).value().item() == 0.0);
}

TEST_CASE("batch losses report matches the differentiable losses") {
  Scores e = random_scores(6, 20), g = random_scores(6, 30);
  for (bool joint_hinge : {false, true})
    for (int mask = 1; mask < 8; ++mask) {
      AblationFlags f = only(mask & 1, mask & 2, mask & 4);
      if (joint_hinge) f.hinge_mode = HingeMode::kJoint;
      CAPTURE(mask);
      Tape t;
      Leaves l = bind(t, e, g);
      LossReport r = batch_losses(l.enc, l.gen, f);
      CHECK(r.loss_D == doctest::Approx(loss_D(l.enc, l.gen, f).value().item()).epsilon(1e-12));
      CHECK(r.loss_EG == doctest::Approx(loss_EG(l.enc, l.gen, f).value().item()).epsilon(1e-12));

      // Totals are the sum of the active reported terms.
      double eg = 0, d = 0;
      if (f.use_unary_x) eg += r.enc.x.raw - r.gen.x.raw;
      if (f.use_unary_z) eg += r.enc.z.raw - r.gen.z.raw;
      if (f.use_joint) eg += r.enc.xz.raw - r.gen.xz.raw;
      if (joint_hinge) {
        d = r.enc.joint_hinged + r.gen.joint_hinged;
      } else {
        if (f.use_unary_x) d += r.enc.x.hinged + r.gen.x.hinged;
        if (f.use_unary_z) d += r.enc.z.hinged + r.gen.z.hinged;
        if (f.use_joint) d += r.enc.xz.hinged + r.gen.xz.hinged;
      }
      CHECK(std::abs(r.loss_EG - eg) < 1e-6);
      CHECK(std::abs(r.loss_D - d) < 1e-6);

      // Independent per-sample recomputation.
      double want_d = 0, want_eg = 0;
      for (std::size_t i = 0; i < 6; ++i) {
        want_d += per_sample_loss_D({e.x[i], e.z[i], e.xz[i]}, 1, f) / 6;
        want_d += per_sample_loss_D({g.x[i], g.z[i], g.xz[i]}, -1, f) / 6;
        want_eg += per_sample_loss_EG({e.x[i], e.z[i], e.xz[i]}, 1, f) / 6;
        want_eg += per_sample_loss_EG({g.x[i], g.z[i], g.xz[i]}, -1, f) / 6;
      }
      CHECK(r.loss_D == doctest::Approx(want_d).epsilon(1e-12));
      CHECK(r.loss_EG == doctest::Approx(want_eg).epsilon(1e-12));
    }
}

TEST_CASE("disabled terms do not influence the losses") {
  Scores e = random_scores(4, 40), g = random_scores(4, 50);
  for (int mask = 1; mask < 7; ++mask) {
    AblationFlags f = only(mask & 1, mask & 2, mask & 4);
    CAPTURE(mask);
    Tape t;
    Leaves l = bind(t, e, g);
    Gradients gd = t.backward(loss_D(l.enc, l.gen, f));
    Gradients ge = t.backward(loss_EG(l.enc, l.gen, f));
    const bool on[] = {f.use_unary_x, f.use_unary_z, f.use_joint};
    const Var enc_v[] = {l.enc.s_x, l.enc.s_z, l.enc.s_xz};
    const Var gen_v[] = {l.gen.s_x, l.gen.s_z, l.gen.s_xz};
    for (int k = 0; k < 3; ++k) {
      if (on[k]) continue;
      CHECK(gd.at(enc_v[k]) == Tensor({4}, 0.0));
      CHECK(gd.at(gen_v[k]) == Tensor({4}, 0.0));
      CHECK(ge.at(enc_v[k]) == Tensor({4}, 0.0));
      CHECK(ge.at(gen_v[k]) == Tensor({4}, 0.0));
    }
    // Finite difference on a disabled score is exactly zero.
    for (int k = 0; k < 3; ++k) {
      if (on[k]) continue;
      Scores e2 = e;
      Tensor& field = k == 0 ? e2.x : k == 1 ? e2.z : e2.xz;
      field[0] += 0.3;
      Tape t2;
      Leaves l2 = bind(t2, e2, g);
      CHECK(loss_D(l2.enc, l2.gen, f).value().item() == loss_D(l.enc, l.gen, f).value().item());
      CHECK(loss_EG(l2.enc, l2.gen, f).value().item() ==
            loss_EG(l.enc, l.gen, f).value().item());
    }
  }
}

TEST_CASE("loss gradients match finite differences") {
  Scores e = random_scores(3, 60), g = random_scores(3, 70);
  for (bool joint_hinge : {false, true}) {
    AblationFlags f;
    if (joint_hinge) f.hinge_mode = HingeMode::kJoint;
    Tape t;
    Leaves l = bind(t, e, g);
    Gradients gd = t.backward(loss_D(l.enc, l.gen, f));
    const double hstep = 1e-6;
    const Var vars[] = {l.enc.s_x, l.enc.s_z, l.enc.s_xz};
    for (int k = 0; k < 3; ++k)
      for (std::size_t i = 0; i < 3; ++i) {
        auto eval = [&](double d) {
          Scores e2 = e;
          Tensor* f2[] = {&e2.x, &e2.z, &e2.xz};
          (*f2[k])[i] += d;
          Tape t2;
          Leaves l2 = bind(t2, e2, g);
          return loss_D(l2.enc, l2.gen, f).value().item();
        };
        const double fd = (eval(hstep) - eval(-hstep)) / (2 * hstep);
        CHECK(gd.at(vars[k])[i] == doctest::Approx(fd).epsilon(1e-6));
      }
  }
}

TEST_CASE("branch size mismatch") {
  Tape t;
  Leaves l = bind(t, random_scores(3, 1), random_scores(4, 2));
  AblationFlags f;
  CHECK(error_code([&] { loss_D(l.enc, l.gen, f); }) == ErrorCode::kShapeMismatch);
  CHECK(error_code([&] { loss_EG(l.enc, l.gen, f); }) == ErrorCode::kShapeMismatch);
  CHECK(error_code([&] { batch_losses(l.enc, l.gen, f); }) == ErrorCode::kShapeMismatch);
}

TEST_CASE("missing active score is an error") {
  Tape t;
  Scores s = random_scores(2, 3);
  ScoreTriple enc{t.leaf(s.x), Var(), t.leaf(s.xz)};
  ScoreTriple gen{t.leaf(s.x), t.leaf(s.z), t.leaf(s.xz)};
  CHECK(error_code([&] { loss_D(enc, gen, AblationFlags{}); }) == ErrorCode::kInvalidArgument);
}
