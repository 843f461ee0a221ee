#include "bbg/params.hpp"

#include <cmath>

#include "bbg/error.hpp"

namespace bbg {

Param& ParamTree::add(const std::string& name, Tensor value, bool trainable) {
  require(!index_.count(name), ErrorCode::kInvalidArgument,
          "duplicate parameter name '" + name + "'");
  Param p;
  p.value = std::move(value);
  p.trainable = trainable;
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(p));
  return entries_.back().second;
}

void ParamTree::enable_spectral_norm(const std::string& name, Rng& rng) {
  Param& p = at(name);
  require(p.value.rank() >= 2, ErrorCode::kShapeMismatch,
          "spectral norm on non-matrix '" + name + "'");
  const std::size_t rows = p.value.dim(0), cols = p.value.size() / rows;
  std::normal_distribution<double> normal(0.0, 1.0);
  auto unit = [&](std::size_t n) {
    Tensor t({n});
    double s = 0.0;
    for (auto& e : t.data()) {
      e = normal(rng);
      s += e * e;
    }
    for (auto& e : t.data()) e /= std::sqrt(s);
    return t;
  };
  p.spectral_norm = true;
  p.sn_u = unit(rows);
  p.sn_v = unit(cols);
  // Warm start; with random vectors u^T W v can be near zero or negative.
  Tape tape;
  spectral_normalize(tape.constant(p.value), p.sn_u, p.sn_v, kSpectralWarmup,
                     true);
}

void ParamTree::enable_ema() {
  for (auto& [name, p] : entries_)
    if (p.trainable) p.ema = p.value;
}

bool ParamTree::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

Param& ParamTree::at(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::kInvalidArgument,
          "unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

const Param& ParamTree::at(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::kInvalidArgument,
          "unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

std::vector<std::string> ParamTree::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

std::size_t ParamTree::parameter_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, p] : entries_)
    if (p.trainable && name.rfind(prefix, 0) == 0) n += p.value.size();
  return n;
}

void ParamTree::update_ema(double decay) {
  for (auto& [name, p] : entries_) {
    if (!p.ema) continue;
    Tensor& s = *p.ema;
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = decay * s[i] + (1.0 - decay) * p.value[i];
  }
}

ParamTree ParamTree::with_ema_weights() const {
  ParamTree copy = *this;
  for (auto& [name, p] : copy.entries_)
    if (p.ema) p.value = *p.ema;
  return copy;
}

BatchNormState load_bn_state(const ParamTree& tree, const std::string& name) {
  BatchNormState s;
  s.mean = tree.at(name + ".mean").value;
  s.var = tree.at(name + ".var").value;
  s.updates = static_cast<long>(tree.at(name + ".updates").value.item());
  return s;
}

void store_bn_state(ParamTree& tree, const std::string& name,
                    const BatchNormState& state) {
  tree.at(name + ".mean").value = state.mean;
  tree.at(name + ".var").value = state.var;
  tree.at(name + ".updates").value =
      Tensor({1}, {static_cast<double>(state.updates)});
}

Binder::Binder(Tape& tape, ParamTree& tree, BindOptions options)
    : tape_(tape), tree_(tree), options_(options) {}

Var Binder::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second.used;
  Param& p = tree_.at(name);
  Bound b;
  b.leaf = tape_.leaf(p.value, options_.trainable && p.trainable);
  b.used = b.leaf;
  if (p.spectral_norm) {
    // Eval passes read the stored vectors without advancing them.
    b.used = spectral_normalize(b.leaf, p.sn_u, p.sn_v, 1,
                                options_.update_state &&
                                    options_.mode == NormMode::kTrain)
                 .normalized;
  }
  bound_.emplace(name, b);
  return b.used;
}

Var Binder::leaf(const std::string& name) {
  param(name);
  return bound_.at(name).leaf;
}

Var Binder::batch_norm(const std::string& name, Var x, bool affine) {
  BatchNormState state = load_bn_state(tree_, name);
  Var gamma, beta;
  if (affine) {
    gamma = param(name + ".gamma");
    beta = param(name + ".beta");
  }
  const bool update = options_.update_state && options_.mode == NormMode::kTrain;
  Var y = batch_stats_normalize(x, options_.mode, state, update, gamma, beta);
  if (update) store_bn_state(tree_, name, state);
  return y;
}

std::map<std::string, Tensor> Binder::gradients(const Gradients& grads) const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, b] : bound_)
    if (grads.contains(b.leaf)) out[name] = grads.at(b.leaf);
  return out;
}

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& e : t.data()) {
    double v;
    do {
      v = normal(rng);
    } while (std::abs(v) > 2.0);
    e = v * std;
  }
  return t;
}

Var linear(Binder& b, const std::string& name, Var x) {
  return add_bias(matmul(x, b.param(name + ".w")), b.param(name + ".b"));
}

Var conv(Binder& b, const std::string& name, Var x, std::size_t stride,
         std::size_t pad) {
  return add_channel_bias(conv2d(x, b.param(name + ".w"), stride, pad),
                          b.param(name + ".b"));
}

Var deconv(Binder& b, const std::string& name, Var x, std::size_t stride,
           std::size_t pad) {
  return add_channel_bias(
      conv_transpose2d(x, b.param(name + ".w"), stride, pad),
      b.param(name + ".b"));
}

void add_linear(ParamTree& tree, const std::string& name, std::size_t in,
                std::size_t out, Rng& rng) {
  tree.add(name + ".w", init_weight({in, out}, in, rng));
  tree.add(name + ".b", Tensor({out}));
}

void add_conv(ParamTree& tree, const std::string& name, std::size_t in_ch,
              std::size_t out_ch, std::size_t k, Rng& rng) {
  tree.add(name + ".w", init_weight({out_ch, in_ch, k, k}, in_ch * k * k, rng));
  tree.add(name + ".b", Tensor({out_ch}));
}

void add_deconv(ParamTree& tree, const std::string& name, std::size_t in_ch,
                std::size_t out_ch, std::size_t k, Rng& rng) {
  tree.add(name + ".w", init_weight({in_ch, out_ch, k, k}, in_ch * k * k, rng));
  tree.add(name + ".b", Tensor({out_ch}));
}

void add_batch_norm(ParamTree& tree, const std::string& name,
                    std::size_t features, bool affine) {
  if (affine) {
    tree.add(name + ".gamma", Tensor({features}, 1.0));
    tree.add(name + ".beta", Tensor({features}, 0.0));
  }
  tree.add(name + ".mean", Tensor({features}, 0.0), false);
  tree.add(name + ".var", Tensor({features}, 1.0), false);
  tree.add(name + ".updates", Tensor({1}, 0.0), false);
}

}  // namespace bbg
