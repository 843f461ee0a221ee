#include "bbg/experiment.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bbg/error.hpp"

namespace fs = std::filesystem;

namespace bbg {
namespace {

constexpr std::uint64_t kValSeedOffset = 0x5eed0001;
constexpr std::uint64_t kHoldoutSeed = 17;

std::string read_text(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, std::string("cannot open ") + what + " '" + path + "'");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// Evaluation forward passes use running statistics once training has
// produced them.
ForwardOptions forward_options(const LoadedRun& run) {
  ForwardOptions o;
  o.norm = run.state.step > 0 ? NormMode::kEval : NormMode::kTrain;
  return o;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

DataSplits make_datasets(const RunConfig& config) {
  const DataSpec& d = config.data;
  DataSplits out;
  if (d.kind == "idx") {
    require(!d.images.empty() && !d.labels.empty(), ErrorCode::kInvalidArgument,
            "data.kind=idx needs data.images and data.labels");
    out.train = load_idx_dataset(d.images, d.labels);
  } else {
    const SynthKind kind = d.kind == "shapes" ? SynthKind::kShapes : SynthKind::kGaussianBlobs;
    out.train = synth_dataset(kind, d.n, d.seed, d.resolution, d.classes, d.noise_scale);
    out.val = synth_dataset(kind, d.n_val, d.seed ^ kValSeedOffset, d.resolution,
                            d.classes, d.noise_scale);
    out.val.split = Split::kVal;
  }
  out.probe = split_holdout(out.train, d.holdout, kHoldoutSeed);
  if (d.kind == "idx") {
    if (!d.val_images.empty()) {
      out.val = load_idx_dataset(d.val_images, d.val_labels);
      out.val.num_classes = std::max(out.val.num_classes, out.train.num_classes);
      out.val.split = Split::kVal;
    } else {
      out.val = out.probe.train_val;
    }
  }
  return out;
}

std::string train_run(const RunConfig& config, bool resume) {
  RunConfig c = config;
  const DataSplits data = make_datasets(c);
  c.train.arch.channels = data.train.channels();
  c.train.validate();
  fs::create_directories(c.out_dir);
  const std::string text = serialize_config(c);
  write_text(fs::path(c.out_dir) / "config.txt", text);
  const fs::path final_path = fs::path(c.out_dir) / "final.bbgn";

  RunOptions opts;
  opts.out_dir = c.out_dir;
  opts.config_text = text;
  if (resume && fs::exists(final_path)) {
    LoadedRun prev = load_run(final_path.string());
    prev.config.train.total_steps = c.train.total_steps;
    Trainer trainer(prev.config.train, data.train, std::move(prev.state));
    opts.config_text = serialize_config(prev.config);
    run_training(trainer, opts);
  } else {
    Trainer trainer(c.train, data.train);
    run_training(trainer, opts);
  }
  return final_path.string();
}

LoadedRun load_run(const std::string& checkpoint_path) {
  const NamedTensors entries = read_named_tensors(checkpoint_path);
  LoadedRun run;
  run.config = parse_config(config_text_from_tensors(entries));
  run.state = state_from_tensors(run.config.train, entries);
  return run;
}

EvalModels eval_models(const LoadedRun& run) {
  EvalModels m;
  m.arch = run.config.train.arch;
  m.arch.use_encoder = run.config.train.flags.use_encoder;
  const bool ema = run.config.eval.ema;
  if (m.arch.use_encoder) m.E = ema ? run.state.E.with_ema_weights() : run.state.E;
  m.G = ema ? run.state.G.with_ema_weights() : run.state.G;
  return m;
}

ProbeResult run_probe(const LoadedRun& run, const DataSplits& data) {
  const EvalModels m = eval_models(run);
  require(m.arch.use_encoder, ErrorCode::kInvalidArgument,
          "probe evaluation needs an encoder");
  const EvalSpec& e = run.config.eval;
  const ForwardOptions fo = forward_options(run);
  // Normalization moments come from probe-train features and are reused for
  // every other split.
  Tensor pooled = encoder_avepool(
      m.E, m.arch, preprocess_eval(data.probe.train.images, m.arch.e_resolution), fo);
  const FeatureMoments moments = compute_moments(pooled);
  auto feats = [&](const Dataset& d) {
    return extract_features(m.E, m.arch, d, e.features, &moments, fo);
  };
  ProbeConfig pc;
  pc.steps = e.probe_steps;
  pc.lr = e.probe_lr;
  pc.batch = e.probe_batch;
  pc.seed = e.seed;
  const FeatureMatrix train = feats(data.probe.train);
  if (e.probe_sweep) {
    pc.sweep = true;
    pc.lr = train_linear_probe(train, feats(data.probe.train_val), pc).lr;
    pc.sweep = false;
  }
  return train_linear_probe(train, feats(data.val), pc);
}

std::vector<KnnResult> run_knn(const LoadedRun& run, const DataSplits& data,
                               const std::vector<std::size_t>& ks,
                               KnnMetric metric) {
  const EvalModels m = eval_models(run);
  require(m.arch.use_encoder, ErrorCode::kInvalidArgument,
          "k-NN evaluation needs an encoder");
  const ForwardOptions fo = forward_options(run);
  const FeatureMatrix train =
      extract_features(m.E, m.arch, data.probe.train, FeatureKind::kAvePool, nullptr, fo);
  const FeatureMatrix val =
      extract_features(m.E, m.arch, data.val, FeatureKind::kAvePool, nullptr, fo);
  std::vector<KnnResult> out;
  for (std::size_t k : ks) out.push_back(knn_classify(train, val, k, metric));
  return out;
}

std::string knn_csv(const std::vector<KnnResult>& results, KnnMetric metric) {
  std::string out = "k,metric,top1,top5\n";
  for (const auto& r : results)
    out += std::to_string(r.k) + (metric == KnnMetric::kL1 ? ",l1," : ",l2,") +
           fmt(r.top1) + "," + (r.top5 ? fmt(*r.top5) : "-") + "\n";
  return out;
}

RelL1 run_reconstruction(const LoadedRun& run, const DataSplits& data,
                         std::size_t iters, const std::string& grid_path) {
  const EvalModels m = eval_models(run);
  require(m.arch.use_encoder, ErrorCode::kInvalidArgument,
          "reconstruction needs an encoder");
  const ForwardOptions fo = forward_options(run);
  const RelL1 err = relative_l1_error(m.E, m.G, m.arch, data.val.images, fo);
  if (!grid_path.empty()) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < std::min<std::size_t>(8, data.val.size()); ++i)
      rows.push_back(i);
    const Tensor x = data.val.batch(rows);
    auto seq = iterated_reconstruction(m.E, m.G, m.arch, x, iters, fo);
    // Bring R_0 to G's resolution so every column has the same size.
    Tape tape;
    seq[0] = to_d_resolution(tape.constant(seq[0]), m.arch).value();
    const std::size_t cols = seq.size(), n = rows.size();
    const std::size_t per = seq[0].size() / n;
    Shape s = seq[0].shape();
    s[0] = n * cols;
    Tensor tiles(s);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cols; ++c)
        std::copy_n(&seq[c][i * per], per, &tiles[(i * cols + c) * per]);
    write_ppm(grid_path, image_grid(tiles, cols));
  }
  return err;
}

void run_samples(const LoadedRun& run, std::size_t n, const std::string& path) {
  require(n >= 1, ErrorCode::kInvalidArgument, "sample count must be >= 1");
  const EvalModels m = eval_models(run);
  Rng rng(run.config.eval.seed);
  const Tensor x = generate_samples(m.G, m.arch, n, rng, forward_options(run));
  std::size_t cols = 1;
  while (cols * cols < n) ++cols;
  write_ppm(path, image_grid(x, cols));
}

MetricClassifier train_reference_classifier(const RunConfig& config,
                                            const DataSplits& data) {
  ClassifierConfig cc;
  cc.steps = config.eval.classifier_steps;
  cc.seed = config.eval.seed;
  cc.resolution = config.train.arch.g_resolution;
  return train_metric_classifier(data.train, cc);
}

GenerationMetrics run_generation_metrics(const LoadedRun& run,
                                         const DataSplits& data,
                                         const MetricClassifier* classifier) {
  std::optional<MetricClassifier> own;
  if (!classifier || classifier->config().resolution != run.config.train.arch.g_resolution) {
    own.emplace(train_reference_classifier(run.config, data));
    classifier = &*own;
  }
  const EvalModels m = eval_models(run);
  Rng rng(run.config.eval.seed);
  const Tensor fake =
      generate_samples(m.G, m.arch, run.config.eval.samples, rng, forward_options(run));
  const Tensor real = preprocess_eval(data.val.images, m.arch.g_resolution);
  GenerationMetrics g;
  g.frechet = frechet_distance(classifier->features(real), classifier->features(fake));
  g.classifier_score = classifier_score(classifier->probabilities(fake));
  g.classifier_accuracy = classifier->accuracy(data.val);
  return g;
}

EvalReport evaluate_run(const LoadedRun& run, const DataSplits& data,
                        const MetricClassifier* classifier) {
  EvalReport r;
  if (run.config.train.flags.use_encoder) {
    const ProbeResult p = run_probe(run, data);
    r.probe_top1 = p.val.top1;
    r.probe_top5 = p.val.top5;
    for (const auto& k : run_knn(run, data, {1, 5}, KnnMetric::kL2))
      r.knn[k.k] = {k.top1, k.top5};
    r.rel_l1 = run_reconstruction(run, data, 0, "").ratio;
  }
  const GenerationMetrics g = run_generation_metrics(run, data, classifier);
  r.frechet = g.frechet;
  r.classifier_score = g.classifier_score;
  return r;
}

AblationGrid parse_grid(const std::string& text) {
  AblationGrid grid;
  std::istringstream in(text);
  std::string line;
  std::string config_lines;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    require(eq != std::string::npos, ErrorCode::kInvalidArgument,
            "grid line " + std::to_string(no) + ": expected key=value");
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = strip(line.substr(0, eq)), value = strip(line.substr(eq + 1));
    if (key == "presets") {
      grid.presets = split_list(value);
      for (const auto& p : grid.presets)
        require(is_preset(p), ErrorCode::kInvalidArgument,
                "grid line " + std::to_string(no) + ": unknown preset '" + p + "'");
    } else if (key == "seeds") {
      grid.seeds.clear();
      for (const auto& s : split_list(value)) {
        RunConfig probe;
        set_config_value(probe, "seed", s);
        grid.seeds.push_back(probe.train.seed);
      }
    } else if (key == "out_dir") {
      grid.out_dir = value;
    } else if (key == "resume") {
      require(value == "true" || value == "false", ErrorCode::kInvalidArgument,
              "grid line " + std::to_string(no) + ": resume expects true|false");
      grid.resume = value == "true";
    } else {
      require(key != "preset", ErrorCode::kInvalidArgument,
              "grid line " + std::to_string(no) + ": use presets= in a grid");
      RunConfig probe;
      try {
        set_config_value(probe, key, value);
      } catch (const Error& e) {
        fail(e.code(), "grid line " + std::to_string(no) + ": " + e.what());
      }
      grid.overrides.emplace_back(key, value);
    }
  }
  require(!grid.presets.empty(), ErrorCode::kInvalidArgument,
          "grid needs a presets= line");
  require(!grid.seeds.empty(), ErrorCode::kInvalidArgument, "grid seeds are empty");
  return grid;
}

AblationGrid load_grid(const std::string& path) {
  return parse_grid(read_text(path, "grid"));
}

std::vector<AblationRow> run_ablation(const AblationGrid& grid) {
  std::vector<AblationRow> rows;
  std::optional<DataSplits> data;
  std::map<std::size_t, MetricClassifier> classifiers;  // keyed by resolution
  for (const auto& preset : grid.presets) {
    for (std::uint64_t seed : grid.seeds) {
      RunConfig c;
      apply_preset(c, preset);
      for (const auto& [k, v] : grid.overrides) set_config_value(c, k, v);
      c.train.seed = seed;
      std::string dir = preset;
      for (char& ch : dir)
        if (ch == '/') ch = '_';
      c.out_dir = (fs::path(grid.out_dir) / (dir + "_s" + std::to_string(seed))).string();
      if (!data) data = make_datasets(c);
      const std::string ckpt = train_run(c, grid.resume);
      const LoadedRun run = load_run(ckpt);
      const std::size_t res = run.config.train.arch.g_resolution;
      auto it = classifiers.find(res);
      if (it == classifiers.end())
        it = classifiers.emplace(res, train_reference_classifier(run.config, *data)).first;
      AblationRow row;
      row.preset = preset;
      row.seed = seed;
      row.columns = grid_columns(run.config);
      row.report = evaluate_run(run, *data, &it->second);
      rows.push_back(std::move(row));
    }
  }
  fs::create_directories(grid.out_dir);
  write_text(fs::path(grid.out_dir) / "ablation.csv", ablation_csv(rows));
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "preset,seed,encoder,stochastic,e_width,e_res,eta_e,g_width,g_res,"
         "s_xz,s_x,s_z,prior,probe_top1,probe_top5,knn1_top1,rel_l1,frechet,"
         "classifier_score\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("-"); };
  auto mark = [](bool b) { return b ? "1" : "0"; };
  for (const auto& r : rows) {
    const GridColumns& g = r.columns;
    const auto knn1 = r.report.knn.find(1);
    out << r.preset << ',' << r.seed << ',' << mark(g.encoder) << ','
        << mark(g.stochastic) << ',' << g.e_width << ',' << g.e_resolution << ','
        << fmt(g.eta_E) << ',' << g.g_width << ',' << g.g_resolution << ','
        << mark(g.joint) << ',' << mark(g.unary_x) << ',' << mark(g.unary_z) << ','
        << (g.prior == PriorKind::kGaussian ? "N" : "U") << ','
        << opt(r.report.probe_top1) << ',' << opt(r.report.probe_top5) << ','
        << (knn1 == r.report.knn.end() ? std::string("-") : fmt(knn1->second.first))
        << ',' << opt(r.report.rel_l1) << ',' << opt(r.report.frechet) << ','
        << opt(r.report.classifier_score) << '\n';
  }
  return out.str();
}

}  // namespace bbg
