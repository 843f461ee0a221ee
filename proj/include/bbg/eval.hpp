#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bbg/data.hpp"
#include "bbg/models.hpp"

namespace bbg {

enum class FeatureKind { kAvePool, kBnCrelu };

struct FeatureMatrix {
  Tensor features;  // [N x F]
  std::vector<int> labels;
  int num_classes = 0;
  FeatureKind kind = FeatureKind::kAvePool;

  std::size_t rows() const { return labels.size(); }
  std::size_t dim() const { return features.dim(1); }
};

struct FeatureMoments {
  Tensor mean;
  Tensor var;
};

// Per-dimension mean and (biased) variance over the rows; N >= 2.
FeatureMoments compute_moments(const Tensor& a);

// h = (a - mean) / sqrt(var + 1e-5); out = [relu(h), relu(-h)].
Tensor bn_crelu_transform(const Tensor& a, const FeatureMoments& moments);

struct ForwardOptions {
  // kEval reads running moments (and fails without them); kTrain normalizes
  // each chunk by its own statistics without touching stored state.
  NormMode norm = NormMode::kEval;
  std::size_t chunk = 250;
};

// Center crop + resize of every image to `resolution` (no augmentation).
Tensor preprocess_eval(const Tensor& images, std::size_t resolution);

// AvePool features of preprocessed images.
Tensor encoder_avepool(const ParamTree& encoder, const ArchConfig& arch,
                       const Tensor& images, const ForwardOptions& opts = {});

// With kind = kBnCrelu and moments == nullptr the moments come from this
// extraction pass.
FeatureMatrix extract_features(const ParamTree& encoder, const ArchConfig& arch,
                               const Dataset& data, FeatureKind kind,
                               const FeatureMoments* moments = nullptr,
                               const ForwardOptions& opts = {});

struct ProbeConfig {
  std::size_t steps = 5000;
  double lr = 0.01;
  double ema_decay = 0.9999;
  std::size_t batch = 256;
  std::uint64_t seed = 0;
  bool sweep = false;  // try {1e-4, 3e-4, 1e-3, 3e-3, 1e-2}, keep the best
};

struct LinearProbe {
  Tensor weights;  // [F x K]
  Tensor bias;     // [K]
};

struct Accuracy {
  double top1 = 0.0;  // percent
  double top5 = 0.0;  // percent, top-min(5, K)
};

struct ProbeResult {
  Accuracy val;
  double lr = 0.0;
  LinearProbe probe;  // EMA-smoothed weights
};

Accuracy evaluate_probe(const LinearProbe& probe, const FeatureMatrix& data);

// Zero-initialized softmax regression trained with Adam on minibatches; the
// reported accuracy uses the EMA-smoothed weights.
ProbeResult train_linear_probe(const FeatureMatrix& train,
                               const FeatureMatrix& val,
                               const ProbeConfig& config);

enum class KnnMetric { kL1 = 1, kL2 = 2 };

// ||a / ||a||_p - b / ||b||_p||_p
double normalized_distance(std::span<const double> a, std::span<const double> b,
                           KnnMetric metric);

struct KnnResult {
  std::size_t k = 0;
  double top1 = 0.0;
  std::optional<double> top5;  // only for k >= 5
  std::vector<int> predictions;
};

// Exact k-NN with majority vote. Labels are ranked by vote count, ties broken
// by the rank of each label's nearest neighbor.
KnnResult knn_classify(const FeatureMatrix& train, const FeatureMatrix& query,
                       std::size_t k, KnnMetric metric);

struct RelL1 {
  double ratio = 0.0;
  double numerator = 0.0;
  double denominator = 0.0;
  double percent() const { return 100.0 * ratio; }
};

// sum_i ||x_i - r_i||_1 / sum_i ||x_{(i+1) mod N} - r_i||_1
RelL1 relative_l1(const Tensor& images, const Tensor& reconstructions);

// G(E(x)) with the encoder mean (tanh of it for the tanh encoder).
Tensor reconstruct(const ParamTree& encoder, const ParamTree& generator,
                   const ArchConfig& arch, const Tensor& images,
                   const ForwardOptions& opts = {});

// Relative l1 between D-resolution inputs and their reconstructions.
RelL1 relative_l1_error(const ParamTree& encoder, const ParamTree& generator,
                        const ArchConfig& arch, const Tensor& images,
                        const ForwardOptions& opts = {});

using Reconstructor = std::function<Tensor(const Tensor&)>;

// R_0 = x, R_{i+1} = reconstructor(R_i).
std::vector<Tensor> iterated_reconstruction(const Tensor& x, std::size_t steps,
                                            const Reconstructor& reconstructor);

// Same, with the trained pair; iterates are resized back to the encoder
// resolution before re-encoding when G is lower resolution.
std::vector<Tensor> iterated_reconstruction(const ParamTree& encoder,
                                            const ParamTree& generator,
                                            const ArchConfig& arch,
                                            const Tensor& x, std::size_t steps,
                                            const ForwardOptions& opts = {});

Tensor generate_samples(const ParamTree& generator, const ArchConfig& arch,
                        std::size_t n, Rng& rng,
                        const ForwardOptions& opts = {});

struct ClassifierConfig {
  std::size_t width = 16;
  std::size_t feature_dim = 64;
  std::size_t steps = 1500;
  std::size_t batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t resolution = 16;
};

// Small supervised ConvNet: the reference line for probe accuracy and the
// feature / probability network for the generation metrics.
class MetricClassifier {
 public:
  MetricClassifier(ClassifierConfig config, std::size_t channels,
                   int num_classes);

  void train(const Dataset& data);
  // Images must already be at config.resolution.
  Tensor features(const Tensor& images) const;
  Tensor probabilities(const Tensor& images) const;
  double accuracy(const Dataset& data) const;  // percent

  const ClassifierConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }
  const ParamTree& params() const { return params_; }

 private:
  Var logits(Binder& b, Var x, Var* features) const;

  ClassifierConfig config_;
  std::size_t channels_;
  int num_classes_;
  mutable ParamTree params_;
};

MetricClassifier train_metric_classifier(const Dataset& data,
                                         const ClassifierConfig& config);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), covariances with
// 1/(N-1).
double frechet_distance(const Tensor& feats_a, const Tensor& feats_b);

// exp(mean_i KL(p_i || p_marginal)), probabilities floored at 1e-12.
double classifier_score(const Tensor& probs);

// Image files: binary PPM (P6). Values in [0, 1], [C x H x W] with C in
// {1, 3} (grayscale is replicated).
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);  // [3 x H x W] in [0, 1]

// Tiles [N x C x H x W] images in [-1, 1] into a grid with `cols` columns and
// a one-pixel gap, returned in [0, 1].
Tensor image_grid(const Tensor& images, std::size_t cols);

// Each first-layer filter min-max normalized to [0, 1] on its own (constant
// filters become 0.5), tiled in a ceil(sqrt(n)) square grid; every filter
// pixel is drawn as a zoom x zoom block.
Tensor first_layer_filter_grid(const ParamTree& encoder, std::size_t zoom = 1);
void export_first_layer_filters(const ParamTree& encoder,
                                const std::string& path, std::size_t zoom = 8);

struct EvalReport {
  std::optional<double> probe_top1, probe_top5;
  std::map<std::size_t, std::pair<double, std::optional<double>>> knn;
  std::optional<double> rel_l1;
  std::optional<double> frechet;
  std::optional<double> classifier_score;

  // Flat "key=value" lines.
  std::string to_key_values() const;
  std::vector<std::string> csv_header() const;
  std::vector<std::string> csv_row() const;
};

}  // namespace bbg
