#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bbg/autodiff.hpp"
#include "bbg/ops.hpp"

namespace bbg {

using Rng = std::mt19937_64;

struct Param {
  Tensor value;
  bool trainable = true;
  bool spectral_norm = false;
  std::optional<Tensor> ema;
  // Power-iteration state when spectral_norm is set.
  Tensor sn_u;
  Tensor sn_v;
};

// Named, insertion-ordered collection of the tensors of one network. Batch
// norm running moments live here too as non-trainable entries.
class ParamTree {
 public:
  Param& add(const std::string& name, Tensor value, bool trainable = true);
  // Marks a >= 2-D parameter for spectral normalization, seeds its
  // singular-vector state from rng and runs kSpectralWarmup power iterations.
  static constexpr int kSpectralWarmup = 15;
  void enable_spectral_norm(const std::string& name, Rng& rng);
  // Creates EMA shadows (copies of the current values) for every trainable
  // tensor.
  void enable_ema();

  bool contains(const std::string& name) const;
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  // Number of trainable scalars, optionally restricted to a name prefix.
  std::size_t parameter_count(const std::string& prefix = "") const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  // shadow <- decay * shadow + (1 - decay) * value for every EMA shadow.
  void update_ema(double decay);
  // Copy whose trainable values are replaced by their EMA shadows.
  ParamTree with_ema_weights() const;

 private:
  std::vector<std::pair<std::string, Param>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Running-moment helpers stored in a ParamTree as "<name>.mean",
// "<name>.var", "<name>.updates".
BatchNormState load_bn_state(const ParamTree& tree, const std::string& name);
void store_bn_state(ParamTree& tree, const std::string& name,
                    const BatchNormState& state);

struct BindOptions {
  bool trainable = false;     // leaves receive gradients
  NormMode mode = NormMode::kTrain;
  bool update_state = false;  // advance spectral-norm vectors / running moments
};

// Places the tensors of a ParamTree on a tape for one forward pass. Each
// parameter is bound (and spectrally normalized) at most once.
class Binder {
 public:
  Binder(Tape& tape, ParamTree& tree, BindOptions options);

  Var param(const std::string& name);
  // Leaf of the raw (pre-normalization) tensor, for gradient lookup.
  Var leaf(const std::string& name);

  Tape& tape() { return tape_; }
  ParamTree& tree() { return tree_; }
  const BindOptions& options() const { return options_; }

  // Batch norm with running moments kept in the tree.
  Var batch_norm(const std::string& name, Var x, bool affine);

  // Gradients of every bound trainable parameter, keyed by name.
  std::map<std::string, Tensor> gradients(const Gradients& grads) const;

 private:
  struct Bound {
    Var leaf;
    Var used;
  };
  Tape& tape_;
  ParamTree& tree_;
  BindOptions options_;
  std::map<std::string, Bound> bound_;
};

// Fan-in scaled truncated normal (std = sqrt(2 / fan_in), cut at 2 std).
Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng);

Var linear(Binder& b, const std::string& name, Var x);
Var conv(Binder& b, const std::string& name, Var x, std::size_t stride,
         std::size_t pad);
Var deconv(Binder& b, const std::string& name, Var x, std::size_t stride,
           std::size_t pad);

void add_linear(ParamTree& tree, const std::string& name, std::size_t in,
                std::size_t out, Rng& rng);
void add_conv(ParamTree& tree, const std::string& name, std::size_t in_ch,
              std::size_t out_ch, std::size_t k, Rng& rng);
void add_deconv(ParamTree& tree, const std::string& name, std::size_t in_ch,
                std::size_t out_ch, std::size_t k, Rng& rng);
void add_batch_norm(ParamTree& tree, const std::string& name,
                    std::size_t features, bool affine);

}  // namespace bbg
