#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bbg/eval.hpp"
#include "bbg/trainer.hpp"

namespace bbg {

struct DataSpec {
  std::string kind = "shapes";  // shapes | blobs | idx
  std::size_t n = 2000;
  std::uint64_t seed = 1;
  std::size_t resolution = 32;
  int classes = 0;  // 0: generator default
  double noise_scale = 1.0;  // synthetic pixel noise multiplier
  std::string images, labels;          // idx only
  std::string val_images, val_labels;  // idx only; empty: use the holdout
  std::size_t n_val = 1000;            // synthetic validation set size
  double holdout = 0.1;                // train_val fraction for lr selection
};

struct EvalSpec {
  std::size_t probe_steps = 2000;
  double probe_lr = 0.01;
  std::size_t probe_batch = 128;
  bool probe_sweep = false;
  FeatureKind features = FeatureKind::kBnCrelu;
  std::size_t classifier_steps = 1500;
  std::size_t samples = 1000;  // generated images for the generation metrics
  std::uint64_t seed = 0;
  bool ema = true;  // false evaluates the raw E/G weights
};

struct RunConfig {
  TrainConfig train;
  DataSpec data;
  EvalSpec eval;
  std::string preset = "base";
  std::string out_dir = "runs/default";
};

// key=value lines; '#' starts a comment; blank lines are ignored. A preset
// key is applied first and the remaining keys override it. Unknown keys,
// duplicate keys, and malformed values throw kInvalidArgument naming the line.
// A non-empty preset_override replaces the text's preset.
RunConfig parse_config(const std::string& text,
                       const std::string& preset_override = "");
RunConfig load_config(const std::string& path,
                      const std::string& preset_override = "");
// Every key, in a fixed order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& config);

// Sets one key on an existing config (same rules as a config line).
void set_config_value(RunConfig& config, const std::string& key,
                      const std::string& value);
std::vector<std::string> config_keys();

// Ablation presets, each one row of the ablation grid expressed as changes to
// the base setup.
std::vector<std::string> preset_names();
bool is_preset(const std::string& name);
// Resets everything the preset controls to base, then applies the row.
void apply_preset(RunConfig& config, const std::string& name);

// The grid columns a config realizes.
struct GridColumns {
  bool encoder = true;
  bool stochastic = true;
  std::size_t e_width = 0;
  std::size_t e_resolution = 0;
  double eta_E = 1.0;
  std::size_t g_width = 0;
  std::size_t g_resolution = 0;
  bool joint = true;
  bool unary_x = true;
  bool unary_z = true;
  PriorKind prior = PriorKind::kGaussian;

  bool operator==(const GridColumns&) const = default;
};
GridColumns grid_columns(const RunConfig& config);

}  // namespace bbg
