#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bbg/config.hpp"

namespace bbg {

struct DataSplits {
  Dataset train;       // full training set (also the GAN training data)
  HoldoutSplit probe;  // probe-train / train_val split of `train`
  Dataset val;         // reported split
};

// Builds the datasets a config describes. Synthetic validation data uses a
// seed derived from data.seed, so it never overlaps the training draw.
DataSplits make_datasets(const RunConfig& config);

// Trains from scratch (or resumes from <out_dir>/final.bbgn when `resume`)
// and returns the path of the final checkpoint. Writes <out_dir>/config.txt.
std::string train_run(const RunConfig& config, bool resume = false);

struct LoadedRun {
  RunConfig config;
  TrainState state;
};

LoadedRun load_run(const std::string& checkpoint_path);

// EMA weights of E and G (and the raw D).
struct EvalModels {
  ParamTree E, G;
  ArchConfig arch;
};
EvalModels eval_models(const LoadedRun& run);

ProbeResult run_probe(const LoadedRun& run, const DataSplits& data);
std::vector<KnnResult> run_knn(const LoadedRun& run, const DataSplits& data,
                               const std::vector<std::size_t>& ks,
                               KnnMetric metric);
// Header "k,metric,top1,top5" and one row per result.
std::string knn_csv(const std::vector<KnnResult>& results, KnnMetric metric);

// Relative l1 over the validation split; optionally writes a grid of
// iterated reconstructions (rows: first 8 validation images, columns R_0..R_n).
RelL1 run_reconstruction(const LoadedRun& run, const DataSplits& data,
                         std::size_t iters, const std::string& grid_path);

void run_samples(const LoadedRun& run, std::size_t n, const std::string& path);

struct GenerationMetrics {
  double frechet = 0.0;
  double classifier_score = 0.0;
  double classifier_accuracy = 0.0;  // on the validation split, percent
};

// The classifier is trained on data.train at G's resolution with the eval
// seed; pass one in to share it across runs.
GenerationMetrics run_generation_metrics(
    const LoadedRun& run, const DataSplits& data,
    const MetricClassifier* classifier = nullptr);
MetricClassifier train_reference_classifier(const RunConfig& config,
                                            const DataSplits& data);

// Full evaluation of one run.
EvalReport evaluate_run(const LoadedRun& run, const DataSplits& data,
                        const MetricClassifier* classifier = nullptr);

// Grid file: key=value lines with `presets=a,b,...`, optional
// `seeds=0,1,...` (default 0), optional `out_dir=`, optional `resume=true`
// (continue runs whose final.bbgn already exists), and any config key as a
// shared override. Trains and evaluates every (preset, seed) pair and
// returns the results CSV (also written to <out_dir>/ablation.csv).
struct AblationRow {
  std::string preset;
  std::uint64_t seed = 0;
  GridColumns columns;
  EvalReport report;
};

struct AblationGrid {
  std::vector<std::string> presets;
  std::vector<std::uint64_t> seeds{0};
  std::string out_dir = "runs/ablation";
  bool resume = false;
  std::vector<std::pair<std::string, std::string>> overrides;
};

AblationGrid parse_grid(const std::string& text);
AblationGrid load_grid(const std::string& path);
std::vector<AblationRow> run_ablation(const AblationGrid& grid);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace bbg
