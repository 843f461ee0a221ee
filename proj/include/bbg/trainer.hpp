#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "bbg/data.hpp"
#include "bbg/models.hpp"
#include "bbg/objective.hpp"

namespace bbg {

struct AdamConfig {
  double beta1 = 0.0;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-tensor first/second moments plus the shared step counter.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::uint64_t t = 0;
};

// Bias-corrected Adam on every tensor named in grads. Throws kNonFinite
// (leaving params and state untouched) when any gradient is non-finite.
void adam_step(ParamTree& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, const AdamConfig& config);

// How persistent state (weights, shadows, moments, singular vectors) is held
// between steps. kF32 rounds it to float32 after every step so checkpoints,
// which store float32, restore it exactly.
enum class Storage { kF32, kF64 };

struct TrainConfig {
  double lr_D = 4e-4;
  double lr_G = 1e-4;
  double eta_E = 1.0;  // E learning rate = eta_E * lr_G
  AdamConfig adam;
  std::size_t d_steps_per_eg = 2;
  double ema_decay = 0.9999;
  std::size_t batch = 64;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 0;
  AblationFlags flags;
  ArchConfig arch;
  AugmentMode augment = AugmentMode::kBase;
  std::size_t eval_every = 100;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  Storage storage = Storage::kF32;

  // Also syncs arch.use_encoder with flags.use_encoder.
  void validate();
};

struct TrainState {
  ParamTree E;  // empty without an encoder
  ParamTree G;
  ParamTree D;
  AdamState opt_E, opt_G, opt_D;
  std::uint64_t step = 0;
  Rng rng;
};

TrainState init_state(const TrainConfig& config);

struct StepReport {
  LossReport d;   // last discriminator sub-step
  LossReport eg;  // joint E/G update
};

// Alternating optimization: d_steps_per_eg discriminator updates, each on a
// fresh minibatch and fresh prior draws, then one joint E/G update followed by
// the EMA update of E and G.
//
// Random draws per discriminator sub-step, in order: B batch indices, B crop
// seeds, B*dim encoder noise (stochastic E only), B*dim prior draws. The E/G
// update draws the same sequence; without an encoder the first three are
// skipped in both.
class Trainer {
 public:
  Trainer(TrainConfig config, const Dataset& data);
  Trainer(TrainConfig config, const Dataset& data, TrainState state);

  StepReport train_step();
  LossReport discriminator_step();
  LossReport encoder_generator_step();

  const TrainConfig& config() const { return config_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }

 private:
  Tensor real_batch();
  void finish_step();

  TrainConfig config_;
  const Dataset& data_;
  TrainState state_;
};

// Checkpoint file: "BBGN", u32 version, u64 entry count, then per entry
// u32 name length, UTF-8 name, u32 rank, rank x u64 extents, float32 values;
// all little-endian.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_named_tensors(const std::string& path, const NamedTensors& entries);
NamedTensors read_named_tensors(const std::string& path);

NamedTensors state_to_tensors(const TrainState& state,
                              const std::string& config_text);
// Rebuilds a state for `config` and overwrites it from the entries. Every
// tensor of the state must be present with a matching shape.
TrainState state_from_tensors(const TrainConfig& config,
                              const NamedTensors& entries);
std::string config_text_from_tensors(const NamedTensors& entries);

void save_checkpoint(const std::string& path, const TrainState& state,
                     const std::string& config_text);

// Column names and values appended to each metrics row by an optional hook.
using MetricsHook = std::function<std::vector<double>(const TrainState&)>;

struct RunOptions {
  std::string out_dir;
  std::string config_text;  // echoed into checkpoints
  std::vector<std::string> extra_columns;
  MetricsHook extra_metrics;
};

std::vector<std::string> metrics_columns();

// Runs train_step until config.total_steps, appending a metrics row every
// eval_every steps to <out_dir>/metrics.csv and writing
// <out_dir>/checkpoint_<step>.bbgn periodically and <out_dir>/final.bbgn at
// the end. A resumed trainer appends to an existing CSV.
void run_training(Trainer& trainer, const RunOptions& options);

}  // namespace bbg
