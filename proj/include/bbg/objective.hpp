#pragma once

#include "bbg/models.hpp"

namespace bbg {

enum class HingeMode { kPerTerm, kJoint };

struct AblationFlags {
  bool use_unary_x = true;
  bool use_unary_z = true;
  bool use_joint = true;
  bool use_encoder = true;
  HingeMode hinge_mode = HingeMode::kPerTerm;

  // No encoder implies neither the z-unary nor the joint term; at least one
  // term must remain.
  void validate() const;
};

// h(t) = max(0, 1 - t)
double hinge(double t);

struct ScoreRow {
  double s_x = 0.0;
  double s_z = 0.0;
  double s_xz = 0.0;
};

// y * (sum of active scores); y is +1 for (x, E(x)) and -1 for (G(z), z).
double per_sample_loss_EG(const ScoreRow& s, int y, const AblationFlags& flags);
// Per-term: sum of h(y * s) over active terms. Joint: h(y * sum of active s).
double per_sample_loss_D(const ScoreRow& s, int y, const AblationFlags& flags);

struct TermMeans {
  double raw = 0.0;     // mean score
  double hinged = 0.0;  // mean h(y * score)
};

struct BranchReport {
  TermMeans x, z, xz;
  double joint_hinged = 0.0;  // mean h(y * sum), joint hinge mode only
};

struct LossReport {
  double loss_EG = 0.0;
  double loss_D = 0.0;
  BranchReport enc;  // (x, E(x)), y = +1
  BranchReport gen;  // (G(z), z), y = -1
};

// Scores of the two branches as plain values (one row per sample).
LossReport batch_losses(const ScoreTriple& enc, const ScoreTriple& gen,
                        const AblationFlags& flags);

// Differentiable L_D: mean over each branch of the per-sample D loss, summed
// over the two branches.
Var loss_D(const ScoreTriple& enc, const ScoreTriple& gen,
           const AblationFlags& flags);

// Differentiable L_EG. enc may carry invalid Vars when the encoder branch is
// omitted (plain GAN), in which case only the generator branch contributes.
Var loss_EG(const ScoreTriple& enc, const ScoreTriple& gen,
            const AblationFlags& flags);

}  // namespace bbg
