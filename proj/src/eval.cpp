#include "bbg/eval.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "bbg/error.hpp"
#include "bbg/trainer.hpp"

namespace bbg {
namespace {

// Runs fn over row chunks of a 4-D tensor and stacks the 2-D or 4-D results.
Tensor map_chunks(const Tensor& images, std::size_t chunk,
                  const std::function<Tensor(const Tensor&)>& fn) {
  const Shape& s = images.shape();
  const std::size_t n = s[0], per = numel(s) / n;
  Tensor out;
  std::size_t out_per = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t count = std::min(chunk, n - start);
    Shape cs = s;
    cs[0] = count;
    Tensor part(cs, std::vector<double>(&images[start * per],
                                        &images[start * per] + count * per));
    Tensor r = fn(part);
    if (out.empty()) {
      Shape os = r.shape();
      out_per = r.size() / count;
      os[0] = n;
      out = Tensor(os);
    }
    std::copy_n(r.data().data(), count * out_per, &out[start * out_per]);
  }
  return out;
}

BindOptions frozen(const ForwardOptions& opts) {
  return BindOptions{false, opts.norm, false};
}

Var encode_mean(Binder& e, Var x, const ArchConfig& arch) {
  EncoderOutput out = encode(e, x, arch, nullptr);
  return out.z;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Accuracy topk(const Tensor& scores, const std::vector<int>& labels,
              int num_classes) {
  const std::size_t n = labels.size(), k = scores.dim(1);
  const std::size_t top = std::min<std::size_t>(5, static_cast<std::size_t>(num_classes));
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::size_t> order(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = &scores[i * k];
    // Ties resolve to the lower class index.
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    if (static_cast<int>(order[0]) == labels[i]) ++hit1;
    for (std::size_t t = 0; t < top; ++t)
      if (static_cast<int>(order[t]) == labels[i]) ++hit5;
  }
  return {100.0 * hit1 / n, 100.0 * hit5 / n};
}

Tensor probe_logits(const LinearProbe& p, const Tensor& x) {
  const std::size_t n = x.dim(0), f = x.dim(1), k = p.bias.size();
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double acc = p.bias[c];
      for (std::size_t j = 0; j < f; ++j) acc += x[i * f + j] * p.weights[j * k + c];
      out[i * k + c] = acc;
    }
  return out;
}

void check_labels(const FeatureMatrix& fm) {
  require(fm.rows() >= 1 && fm.features.rank() == 2 &&
              fm.features.dim(0) == fm.rows(),
          ErrorCode::kShapeMismatch, "feature matrix rows and labels differ");
  for (int l : fm.labels)
    require(l >= 0 && l < fm.num_classes, ErrorCode::kInvalidArgument,
            "label " + std::to_string(l) + " out of range");
}

ProbeResult train_probe_once(const FeatureMatrix& train,
                             const FeatureMatrix& val, const ProbeConfig& cfg,
                             double lr) {
  const std::size_t f = train.dim(), k = static_cast<std::size_t>(train.num_classes);
  const std::size_t n = train.rows();
  ParamTree tree;
  tree.add("w", Tensor({f, k}));
  tree.add("b", Tensor({k}));
  tree.enable_ema();
  AdamState adam;
  const AdamConfig adam_cfg{0.9, 0.999, 1e-8};
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const std::size_t batch = std::min(cfg.batch, n);
  Tensor xb({batch, f});
  std::vector<std::size_t> rows(batch);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& r : rows) r = pick(rng);
    for (std::size_t i = 0; i < batch; ++i)
      std::copy_n(&train.features[rows[i] * f], f, &xb[i * f]);
    LinearProbe cur{tree.at("w").value, tree.at("b").value};
    Tensor logits = probe_logits(cur, xb);
    // Softmax cross-entropy gradient: (p - onehot) / B.
    Tensor gl({batch, k});
    for (std::size_t i = 0; i < batch; ++i) {
      const double* row = &logits[i * k];
      const double mx = *std::max_element(row, row + k);
      double z = 0.0;
      for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
      for (std::size_t c = 0; c < k; ++c) {
        const double p = std::exp(row[c] - mx) / z;
        gl[i * k + c] =
            (p - (static_cast<int>(c) == train.labels[rows[i]] ? 1.0 : 0.0)) / batch;
      }
    }
    Tensor gw({f, k}), gb({k});
    for (std::size_t i = 0; i < batch; ++i)
      for (std::size_t c = 0; c < k; ++c) {
        const double g = gl[i * k + c];
        gb[c] += g;
        for (std::size_t j = 0; j < f; ++j) gw[j * k + c] += xb[i * f + j] * g;
      }
    adam_step(tree, {{"w", gw}, {"b", gb}}, adam, lr, adam_cfg);
    tree.update_ema(cfg.ema_decay);
  }
  ProbeResult r;
  r.lr = lr;
  r.probe = {*tree.at("w").ema, *tree.at("b").ema};
  r.val = evaluate_probe(r.probe, val);
  return r;
}

}  // namespace

FeatureMoments compute_moments(const Tensor& a) {
  require(a.rank() == 2 && a.dim(0) >= 2, ErrorCode::kInvalidArgument,
          "feature moments need at least 2 rows");
  const std::size_t n = a.dim(0), f = a.dim(1);
  FeatureMoments m{Tensor({f}), Tensor({f})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) m.mean[j] += a[i * f + j];
  for (std::size_t j = 0; j < f; ++j) m.mean[j] /= n;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double d = a[i * f + j] - m.mean[j];
      m.var[j] += d * d;
    }
  for (std::size_t j = 0; j < f; ++j) m.var[j] /= n;
  return m;
}

Tensor bn_crelu_transform(const Tensor& a, const FeatureMoments& m) {
  require(a.rank() == 2 && m.mean.size() == a.dim(1) && m.var.size() == a.dim(1),
          ErrorCode::kShapeMismatch, "bn_crelu_transform: moment size mismatch");
  const std::size_t n = a.dim(0), f = a.dim(1);
  Tensor out({n, 2 * f});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const double h =
          (a[i * f + j] - m.mean[j]) / std::sqrt(m.var[j] + BatchNormState::kEpsilon);
      out[i * 2 * f + j] = h > 0 ? h : 0.0;
      out[i * 2 * f + f + j] = h < 0 ? -h : 0.0;
    }
  return out;
}

Tensor preprocess_eval(const Tensor& images, std::size_t resolution) {
  const Shape& s = images.shape();
  if (s[2] == resolution && s[3] == resolution) return images;
  Rng unused(0);
  return augment_batch(images, {AugmentMode::kNone, resolution}, unused);
}

Tensor encoder_avepool(const ParamTree& encoder, const ArchConfig& arch,
                       const Tensor& images, const ForwardOptions& opts) {
  ParamTree e = encoder;
  return map_chunks(images, opts.chunk, [&](const Tensor& part) {
    Tape tape;
    Binder b(tape, e, frozen(opts));
    return encoder_features(b, tape.constant(part), arch).value();
  });
}

FeatureMatrix extract_features(const ParamTree& encoder, const ArchConfig& arch,
                               const Dataset& data, FeatureKind kind,
                               const FeatureMoments* moments,
                               const ForwardOptions& opts) {
  FeatureMatrix fm;
  fm.labels = data.labels;
  fm.num_classes = data.num_classes;
  fm.kind = kind;
  Tensor pooled = encoder_avepool(
      encoder, arch, preprocess_eval(data.images, arch.e_resolution), opts);
  if (kind == FeatureKind::kAvePool) {
    fm.features = std::move(pooled);
  } else {
    fm.features = bn_crelu_transform(
        pooled, moments ? *moments : compute_moments(pooled));
  }
  return fm;
}

Accuracy evaluate_probe(const LinearProbe& probe, const FeatureMatrix& data) {
  check_labels(data);
  require(probe.weights.dim(0) == data.dim(), ErrorCode::kShapeMismatch,
          "probe feature size mismatch");
  return topk(probe_logits(probe, data.features), data.labels, data.num_classes);
}

ProbeResult train_linear_probe(const FeatureMatrix& train,
                               const FeatureMatrix& val,
                               const ProbeConfig& cfg) {
  check_labels(train);
  check_labels(val);
  require(train.dim() == val.dim() && train.num_classes == val.num_classes,
          ErrorCode::kShapeMismatch, "probe train/val feature mismatch");
  if (!cfg.sweep) return train_probe_once(train, val, cfg, cfg.lr);
  ProbeResult best;
  bool first = true;
  for (double lr : {1e-4, 3e-4, 1e-3, 3e-3, 1e-2}) {
    ProbeResult r = train_probe_once(train, val, cfg, lr);
    if (first || r.val.top1 > best.val.top1) best = std::move(r);
    first = false;
  }
  return best;
}

double normalized_distance(std::span<const double> a, std::span<const double> b,
                           KnnMetric metric) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch,
          "normalized_distance size mismatch");
  auto norm = [metric](std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += metric == KnnMetric::kL1 ? std::abs(x) : x * x;
    return metric == KnnMetric::kL1 ? s : std::sqrt(s);
  };
  const double na = norm(a), nb = norm(b);
  require(na > 0.0 && nb > 0.0, ErrorCode::kInvalidArgument,
          "zero-norm feature vector");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] / na - b[i] / nb;
    d += metric == KnnMetric::kL1 ? std::abs(t) : t * t;
  }
  return metric == KnnMetric::kL1 ? d : std::sqrt(d);
}

KnnResult knn_classify(const FeatureMatrix& train, const FeatureMatrix& query,
                       std::size_t k, KnnMetric metric) {
  check_labels(train);
  check_labels(query);
  require(train.dim() == query.dim(), ErrorCode::kShapeMismatch,
          "k-NN feature size mismatch");
  require(k >= 1 && k <= train.rows(), ErrorCode::kInvalidArgument,
          "k must be in [1, N_train]");
  const std::size_t f = train.dim(), nt = train.rows();
  const bool l1 = metric == KnnMetric::kL1;

  auto normalize = [&](const Tensor& t) {
    Tensor out = t;
    for (std::size_t i = 0; i < t.dim(0); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double v = t[i * f + j];
        s += l1 ? std::abs(v) : v * v;
      }
      if (!l1) s = std::sqrt(s);
      require(s > 0.0, ErrorCode::kInvalidArgument,
              "zero-norm feature row " + std::to_string(i));
      for (std::size_t j = 0; j < f; ++j) out[i * f + j] /= s;
    }
    return out;
  };
  const Tensor tn = normalize(train.features);
  const Tensor qn = normalize(query.features);
  const int classes = std::max(train.num_classes, query.num_classes);

  KnnResult result;
  result.k = k;
  std::size_t hit1 = 0, hit5 = 0;
  std::vector<std::pair<double, std::size_t>> dist(nt);
  std::vector<int> votes(classes), first_rank(classes);
  std::vector<int> ranked(classes);
  for (std::size_t q = 0; q < query.rows(); ++q) {
    for (std::size_t i = 0; i < nt; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double t = qn[q * f + j] - tn[i * f + j];
        d += l1 ? std::abs(t) : t * t;
      }
      dist[i] = {d, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::fill(votes.begin(), votes.end(), 0);
    std::fill(first_rank.begin(), first_rank.end(), -1);
    for (std::size_t r = 0; r < k; ++r) {
      const int label = train.labels[dist[r].second];
      if (votes[label]++ == 0) first_rank[label] = static_cast<int>(r);
    }
    std::iota(ranked.begin(), ranked.end(), 0);
    std::sort(ranked.begin(), ranked.end(), [&](int a, int b) {
      if (votes[a] != votes[b]) return votes[a] > votes[b];
      if (votes[a] == 0) return a < b;
      return first_rank[a] < first_rank[b];
    });
    result.predictions.push_back(ranked[0]);
    if (ranked[0] == query.labels[q]) ++hit1;
    for (int t = 0; t < std::min(5, classes); ++t)
      if (votes[ranked[t]] > 0 && ranked[t] == query.labels[q]) ++hit5;
  }
  const double n = static_cast<double>(query.rows());
  result.top1 = 100.0 * hit1 / n;
  if (k >= 5) result.top5 = 100.0 * hit5 / n;
  return result;
}

RelL1 relative_l1(const Tensor& images, const Tensor& recon) {
  require(images.shape() == recon.shape(), ErrorCode::kShapeMismatch,
          "relative_l1: images " + shape_string(images.shape()) +
              " vs reconstructions " + shape_string(recon.shape()));
  const std::size_t n = images.dim(0);
  require(n >= 2, ErrorCode::kInvalidArgument, "relative_l1 needs N >= 2");
  const std::size_t per = images.size() / n;
  RelL1 r;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t next = (i + 1) % n;
    for (std::size_t p = 0; p < per; ++p) {
      r.numerator += std::abs(images[i * per + p] - recon[i * per + p]);
      r.denominator += std::abs(images[next * per + p] - recon[i * per + p]);
    }
  }
  require(r.denominator > 0.0, ErrorCode::kInvalidArgument,
          "relative_l1: zero baseline error");
  r.ratio = r.numerator / r.denominator;
  return r;
}

Tensor reconstruct(const ParamTree& encoder, const ParamTree& generator,
                   const ArchConfig& arch, const Tensor& images,
                   const ForwardOptions& opts) {
  ParamTree e = encoder, g = generator;
  return map_chunks(images, opts.chunk, [&](const Tensor& part) {
    Tape tape;
    Binder eb(tape, e, frozen(opts));
    Binder gb(tape, g, frozen(opts));
    return generate(gb, encode_mean(eb, tape.constant(part), arch), arch).value();
  });
}

RelL1 relative_l1_error(const ParamTree& encoder, const ParamTree& generator,
                        const ArchConfig& arch, const Tensor& images,
                        const ForwardOptions& opts) {
  const Tensor x = preprocess_eval(images, arch.e_resolution);
  const Tensor recon = reconstruct(encoder, generator, arch, x, opts);
  Tape tape;
  const Tensor x_d = to_d_resolution(tape.constant(x), arch).value();
  return relative_l1(x_d, recon);
}

std::vector<Tensor> iterated_reconstruction(const Tensor& x, std::size_t steps,
                                            const Reconstructor& reconstructor) {
  std::vector<Tensor> seq{x};
  for (std::size_t i = 0; i < steps; ++i) seq.push_back(reconstructor(seq.back()));
  return seq;
}

std::vector<Tensor> iterated_reconstruction(const ParamTree& encoder,
                                            const ParamTree& generator,
                                            const ArchConfig& arch,
                                            const Tensor& x, std::size_t steps,
                                            const ForwardOptions& opts) {
  const Tensor x0 = preprocess_eval(x, arch.e_resolution);
  return iterated_reconstruction(x0, steps, [&](const Tensor& r) {
    Tensor in = r;
    if (r.dim(2) != arch.e_resolution) {
      Rng unused(0);
      const std::size_t s = r.dim(2);
      in = Tensor({r.dim(0), r.dim(1), arch.e_resolution, arch.e_resolution});
      const std::size_t per = r.size() / r.dim(0);
      const std::size_t out_per = in.size() / in.dim(0);
      for (std::size_t i = 0; i < r.dim(0); ++i) {
        Tensor img({r.dim(1), s, s},
                   std::vector<double>(&r[i * per], &r[i * per] + per));
        Tensor up = resample(img, {0, 0, double(s), double(s)}, arch.e_resolution);
        std::copy_n(up.data().data(), out_per, &in[i * out_per]);
      }
    }
    return reconstruct(encoder, generator, arch, in, opts);
  });
}

Tensor generate_samples(const ParamTree& generator, const ArchConfig& arch,
                        std::size_t n, Rng& rng, const ForwardOptions& opts) {
  ParamTree g = generator;
  const Tensor z = sample_prior(arch.latent, n, rng);
  Tensor zz = z.reshaped({n, arch.latent.dim, 1, 1});
  return map_chunks(zz, opts.chunk, [&](const Tensor& part) {
    Tape tape;
    Binder gb(tape, g, frozen(opts));
    Var zp = tape.constant(part.reshaped({part.dim(0), arch.latent.dim}));
    return generate(gb, zp, arch).value();
  });
}

MetricClassifier::MetricClassifier(ClassifierConfig config,
                                   std::size_t channels, int num_classes)
    : config_(config), channels_(channels), num_classes_(num_classes) {
  require(num_classes >= 2, ErrorCode::kInvalidArgument,
          "classifier needs at least 2 classes");
  Rng rng(config_.seed);
  std::size_t in = channels_;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t out = config_.width << i;
    add_conv(params_, "conv" + std::to_string(i), in, out, 3, rng);
    in = out;
  }
  add_linear(params_, "feat", in, config_.feature_dim, rng);
  add_linear(params_, "logits", config_.feature_dim,
             static_cast<std::size_t>(num_classes), rng);
}

Var MetricClassifier::logits(Binder& b, Var x, Var* features) const {
  const Shape& s = x.shape();
  require(s.size() == 4 && s[1] == channels_ && s[2] == config_.resolution &&
              s[3] == config_.resolution,
          ErrorCode::kShapeMismatch,
          "classifier input " + shape_string(s) + " does not match config");
  Var h = x;
  for (std::size_t i = 0; i < 3; ++i)
    h = relu(conv(b, "conv" + std::to_string(i), h, 2, 1));
  Var f = relu(linear(b, "feat", global_avg_pool(h)));
  if (features) *features = f;
  return linear(b, "logits", f);
}

void MetricClassifier::train(const Dataset& data) {
  require(data.num_classes <= num_classes_, ErrorCode::kInvalidArgument,
          "dataset has more classes than the classifier");
  const Tensor images = preprocess_eval(data.images, config_.resolution);
  Rng rng(config_.seed + 1);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  AdamState adam;
  const AdamConfig adam_cfg{0.9, 0.999, 1e-8};
  const std::size_t per = images.size() / data.size();
  std::vector<std::size_t> rows(config_.batch);
  std::vector<int> labels(config_.batch);
  for (std::size_t step = 0; step < config_.steps; ++step) {
    Tensor xb({config_.batch, images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < config_.batch; ++i) {
      rows[i] = pick(rng);
      labels[i] = data.labels[rows[i]];
      std::copy_n(&images[rows[i] * per], per, &xb[i * per]);
    }
    Tape tape;
    Binder b(tape, params_, {true, NormMode::kTrain, true});
    Var loss = softmax_cross_entropy(logits(b, tape.constant(xb), nullptr), labels);
    adam_step(params_, b.gradients(tape.backward(loss)), adam, config_.lr,
              adam_cfg);
  }
}

Tensor MetricClassifier::features(const Tensor& images) const {
  return map_chunks(images, 250, [&](const Tensor& part) {
    Tape tape;
    Binder b(tape, params_, {false, NormMode::kEval, false});
    Var f;
    logits(b, tape.constant(part), &f);
    return f.value();
  });
}

Tensor MetricClassifier::probabilities(const Tensor& images) const {
  Tensor logit = map_chunks(images, 250, [&](const Tensor& part) {
    Tape tape;
    Binder b(tape, params_, {false, NormMode::kEval, false});
    return logits(b, tape.constant(part), nullptr).value();
  });
  const std::size_t n = logit.dim(0), k = logit.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = &logit[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < k; ++c) row[c] /= z;
  }
  return logit;
}

double MetricClassifier::accuracy(const Dataset& data) const {
  const Tensor p = probabilities(preprocess_eval(data.images, config_.resolution));
  return topk(p, data.labels, num_classes_).top1;
}

MetricClassifier train_metric_classifier(const Dataset& data,
                                         const ClassifierConfig& config) {
  MetricClassifier c(config, data.channels(), data.num_classes);
  c.train(data);
  return c;
}

double frechet_distance(const Tensor& feats_a, const Tensor& feats_b) {
  require(feats_a.rank() == 2 && feats_b.rank() == 2 &&
              feats_a.dim(1) == feats_b.dim(1),
          ErrorCode::kShapeMismatch, "frechet_distance: feature size mismatch");
  require(feats_a.dim(0) >= 2 && feats_b.dim(0) >= 2,
          ErrorCode::kInvalidArgument, "frechet_distance needs >= 2 rows per set");
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto f = static_cast<Eigen::Index>(feats_a.dim(1));
  auto stats = [f](const Tensor& t, VectorXd& mu, MatrixXd& cov) {
    const auto n = static_cast<Eigen::Index>(t.dim(0));
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                   Eigen::RowMajor>>
        m(t.data().data(), n, f);
    mu = m.colwise().mean().transpose();
    MatrixXd centered = m.rowwise() - mu.transpose();
    cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  };
  VectorXd mu_a, mu_b;
  MatrixXd cov_a, cov_b;
  stats(feats_a, mu_a, cov_a);
  stats(feats_b, mu_b, cov_b);

  auto psd_sqrt_eigs = [](const MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
    VectorXd ev = es.eigenvalues();
    const double tol = 1e-6 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      require(ev(i) > -tol, ErrorCode::kNonFinite,
              std::string("frechet_distance: ") + what +
                  " is not positive semi-definite");
      ev(i) = std::sqrt(std::max(0.0, ev(i)));
    }
    return std::pair<VectorXd, MatrixXd>(ev, es.eigenvectors());
  };
  // Tr((S_a S_b)^(1/2)) = Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)).
  auto [sa_vals, sa_vecs] = psd_sqrt_eigs(cov_a, "covariance");
  MatrixXd sqrt_a = sa_vecs * sa_vals.asDiagonal() * sa_vecs.transpose();
  auto [mid_vals, mid_vecs] =
      psd_sqrt_eigs(sqrt_a * cov_b * sqrt_a, "covariance product");
  const double fd = (mu_a - mu_b).squaredNorm() + cov_a.trace() +
                    cov_b.trace() - 2.0 * mid_vals.sum();
  return std::max(0.0, fd);
}

double classifier_score(const Tensor& probs) {
  require(probs.rank() == 2 && probs.dim(0) >= 1, ErrorCode::kShapeMismatch,
          "classifier_score expects [N x K] probabilities");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  constexpr double kFloor = 1e-12;
  std::vector<double> marginal(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs[i * k + c];
      require(p >= 0.0, ErrorCode::kInvalidArgument, "negative probability");
      s += p;
      marginal[c] += p / n;
    }
    require(std::abs(s - 1.0) < 1e-5, ErrorCode::kInvalidArgument,
            "probability row does not sum to 1");
  }
  double kl_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double p = probs[i * k + c];
      if (p == 0.0) continue;
      kl_sum += p * (std::log(std::max(p, kFloor)) -
                     std::log(std::max(marginal[c], kFloor)));
    }
  return std::exp(kl_sum / n);
}

void write_ppm(const std::string& path, const Tensor& image) {
  require(image.rank() == 3 && (image.dim(0) == 1 || image.dim(0) == 3),
          ErrorCode::kShapeMismatch, "write_ppm expects [1|3 x H x W]");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write '" + path + "'");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = image[((c == 1 ? 0 : ch) * h + y) * w + x];
        out.put(static_cast<char>(
            static_cast<unsigned char>(std::lround(clamp01(v) * 255.0))));
      }
  require(out.good(), ErrorCode::kIo, "write to '" + path + "' failed");
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open '" + path + "'");
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t += ch;
      }
    }
    return t;
  };
  require(token() == "P6", ErrorCode::kFormat, "'" + path + "' is not a P6 PPM");
  const std::size_t w = std::stoul(token()), h = std::stoul(token());
  require(token() == "255", ErrorCode::kFormat, "unsupported PPM max value");
  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        char b;
        in.get(b);
        require(in.good(), ErrorCode::kFormat, "'" + path + "': truncated PPM");
        img[(ch * h + y) * w + x] = static_cast<unsigned char>(b) / 255.0;
      }
  return img;
}

Tensor image_grid(const Tensor& images, std::size_t cols) {
  require(images.rank() == 4 && cols >= 1, ErrorCode::kShapeMismatch,
          "image_grid expects [N x C x H x W]");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2),
                    w = images.dim(3);
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t gh = rows * (h + 1) + 1, gw = cols * (w + 1) + 1;
  Tensor grid({3, gh, gw});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oy = 1 + (i / cols) * (h + 1), ox = 1 + (i % cols) * (w + 1);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double v = images[((i * c + (c == 3 ? ch : 0)) * h + y) * w + x];
          grid[(ch * gh + oy + y) * gw + ox + x] = clamp01((v + 1.0) / 2.0);
        }
  }
  return grid;
}

Tensor first_layer_filter_grid(const ParamTree& encoder, std::size_t zoom) {
  const Tensor& w = encoder.at("trunk0.conv.w").value;
  require(w.rank() == 4, ErrorCode::kShapeMismatch,
          "first encoder layer is not convolutional");
  require(zoom >= 1, ErrorCode::kInvalidArgument, "zoom must be >= 1");
  const std::size_t n = w.dim(0), c = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const std::size_t side =
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const std::size_t th = kh * zoom, tw = kw * zoom;
  Tensor grid({3, side * th, side * tw});
  const std::size_t per = c * kh * kw;
  for (std::size_t f = 0; f < n; ++f) {
    const double* p = &w[f * per];
    const auto [lo, hi] = std::minmax_element(p, p + per);
    const double range = *hi - *lo;
    const std::size_t oy = (f / side) * th, ox = (f % side) * tw;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < th; ++y)
        for (std::size_t x = 0; x < tw; ++x) {
          const std::size_t src_c = c == 3 ? ch : 0;
          const double v = p[(src_c * kh + y / zoom) * kw + x / zoom];
          grid[(ch * side * th + oy + y) * side * tw + ox + x] =
              range > 0.0 ? (v - *lo) / range : 0.5;
        }
  }
  return grid;
}

void export_first_layer_filters(const ParamTree& encoder,
                                const std::string& path, std::size_t zoom) {
  write_ppm(path, first_layer_filter_grid(encoder, zoom));
}

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out << std::setprecision(8) << v;
  return out.str();
}

std::string opt(const std::optional<double>& v) { return v ? fmt(*v) : "-"; }

}  // namespace

std::string EvalReport::to_key_values() const {
  const auto header = csv_header();
  const auto row = csv_row();
  std::ostringstream out;
  for (std::size_t i = 0; i < header.size(); ++i)
    out << header[i] << '=' << row[i] << '\n';
  return out.str();
}

std::vector<std::string> EvalReport::csv_header() const {
  std::vector<std::string> h = {"probe_top1", "probe_top5"};
  for (const auto& [k, v] : knn) {
    h.push_back("knn_k" + std::to_string(k) + "_top1");
    h.push_back("knn_k" + std::to_string(k) + "_top5");
  }
  h.insert(h.end(), {"rel_l1", "frechet", "classifier_score"});
  return h;
}

std::vector<std::string> EvalReport::csv_row() const {
  std::vector<std::string> r = {opt(probe_top1), opt(probe_top5)};
  for (const auto& [k, v] : knn) {
    r.push_back(fmt(v.first));
    r.push_back(opt(v.second));
  }
  r.insert(r.end(), {opt(rel_l1), opt(frechet), opt(classifier_score)});
  return r;
}

}  // namespace bbg
