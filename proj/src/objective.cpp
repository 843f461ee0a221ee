#include "bbg/objective.hpp"

#include <algorithm>
#include <vector>

#include "bbg/error.hpp"

namespace bbg {
namespace {

void check_y(int y) {
  require(y == 1 || y == -1, ErrorCode::kInvalidArgument,
          "label y must be +1 or -1, got " + std::to_string(y));
}

double active_sum(const ScoreRow& s, const AblationFlags& f) {
  double t = 0.0;
  if (f.use_unary_x) t += s.s_x;
  if (f.use_unary_z) t += s.s_z;
  if (f.use_joint) t += s.s_xz;
  return t;
}

std::vector<Var> active_terms(const ScoreTriple& s, const AblationFlags& f) {
  std::vector<Var> terms;
  if (f.use_unary_x) terms.push_back(s.s_x);
  if (f.use_unary_z) terms.push_back(s.s_z);
  if (f.use_joint) terms.push_back(s.s_xz);
  for (const Var& v : terms)
    require(v.valid(), ErrorCode::kInvalidArgument,
            "active loss term has no score");
  return terms;
}

Var sum_terms(const std::vector<Var>& terms) {
  Var t = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) t = add(t, terms[i]);
  return t;
}

// mean h(y * v) = mean relu(1 - y v)
Var mean_hinge(Var v, int y) {
  return mean(relu(add_scalar(scale(v, -static_cast<double>(y)), 1.0)));
}

Var branch_loss_D(const ScoreTriple& s, int y, const AblationFlags& f) {
  const std::vector<Var> terms = active_terms(s, f);
  if (f.hinge_mode == HingeMode::kJoint) return mean_hinge(sum_terms(terms), y);
  Var total = mean_hinge(terms[0], y);
  for (std::size_t i = 1; i < terms.size(); ++i)
    total = add(total, mean_hinge(terms[i], y));
  return total;
}

Var branch_loss_EG(const ScoreTriple& s, int y, const AblationFlags& f) {
  return scale(mean(sum_terms(active_terms(s, f))), static_cast<double>(y));
}

std::size_t branch_size(const ScoreTriple& s) {
  return s.s_x.valid() ? s.s_x.shape()[0] : 0;
}

BranchReport summarize(const ScoreTriple& s, int y, const AblationFlags& f) {
  BranchReport r;
  const std::size_t n = branch_size(s);
  if (n == 0) return r;
  auto fill = [&](const Var& v, TermMeans& m) {
    if (!v.valid()) return;
    for (double e : v.value().data()) {
      m.raw += e;
      m.hinged += hinge(y * e);
    }
    m.raw /= static_cast<double>(n);
    m.hinged /= static_cast<double>(n);
  };
  fill(s.s_x, r.x);
  fill(s.s_z, r.z);
  fill(s.s_xz, r.xz);
  if (f.hinge_mode == HingeMode::kJoint) {
    for (std::size_t i = 0; i < n; ++i) {
      ScoreRow row;
      row.s_x = s.s_x.value()[i];
      if (s.s_z.valid()) row.s_z = s.s_z.value()[i];
      if (s.s_xz.valid()) row.s_xz = s.s_xz.value()[i];
      r.joint_hinged += hinge(y * active_sum(row, f));
    }
    r.joint_hinged /= static_cast<double>(n);
  }
  return r;
}

double branch_total_D(const BranchReport& r, const AblationFlags& f) {
  if (f.hinge_mode == HingeMode::kJoint) return r.joint_hinged;
  double t = 0.0;
  if (f.use_unary_x) t += r.x.hinged;
  if (f.use_unary_z) t += r.z.hinged;
  if (f.use_joint) t += r.xz.hinged;
  return t;
}

double branch_total_EG(const BranchReport& r, int y, const AblationFlags& f) {
  double t = 0.0;
  if (f.use_unary_x) t += r.x.raw;
  if (f.use_unary_z) t += r.z.raw;
  if (f.use_joint) t += r.xz.raw;
  return y * t;
}

}  // namespace

void AblationFlags::validate() const {
  require(use_encoder || (!use_joint && !use_unary_z),
          ErrorCode::kInvalidArgument,
          "without an encoder only the x unary term is available");
  require(use_unary_x || use_unary_z || use_joint, ErrorCode::kInvalidArgument,
          "at least one loss term must be active");
}

double hinge(double t) { return std::max(0.0, 1.0 - t); }

double per_sample_loss_EG(const ScoreRow& s, int y, const AblationFlags& f) {
  check_y(y);
  return y * active_sum(s, f);
}

double per_sample_loss_D(const ScoreRow& s, int y, const AblationFlags& f) {
  check_y(y);
  if (f.hinge_mode == HingeMode::kJoint) return hinge(y * active_sum(s, f));
  double t = 0.0;
  if (f.use_unary_x) t += hinge(y * s.s_x);
  if (f.use_unary_z) t += hinge(y * s.s_z);
  if (f.use_joint) t += hinge(y * s.s_xz);
  return t;
}

LossReport batch_losses(const ScoreTriple& enc, const ScoreTriple& gen,
                        const AblationFlags& flags) {
  flags.validate();
  const std::size_t ne = branch_size(enc), ng = branch_size(gen);
  require(ne == 0 || ne == ng, ErrorCode::kShapeMismatch,
          "encoder and generator branches differ in size");
  LossReport r;
  r.enc = summarize(enc, +1, flags);
  r.gen = summarize(gen, -1, flags);
  r.loss_D = branch_total_D(r.gen, flags);
  r.loss_EG = branch_total_EG(r.gen, -1, flags);
  if (ne > 0) {
    r.loss_D += branch_total_D(r.enc, flags);
    r.loss_EG += branch_total_EG(r.enc, +1, flags);
  }
  return r;
}

Var loss_D(const ScoreTriple& enc, const ScoreTriple& gen,
           const AblationFlags& flags) {
  flags.validate();
  require(branch_size(enc) == branch_size(gen), ErrorCode::kShapeMismatch,
          "encoder and generator branches differ in size");
  return add(branch_loss_D(enc, +1, flags), branch_loss_D(gen, -1, flags));
}

Var loss_EG(const ScoreTriple& enc, const ScoreTriple& gen,
            const AblationFlags& flags) {
  flags.validate();
  Var g = branch_loss_EG(gen, -1, flags);
  if (!enc.s_x.valid()) return g;
  require(branch_size(enc) == branch_size(gen), ErrorCode::kShapeMismatch,
          "encoder and generator branches differ in size");
  return add(branch_loss_EG(enc, +1, flags), g);
}

}  // namespace bbg
