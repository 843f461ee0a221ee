#include "bbg.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <optional>
#include <sstream>
#include <string>

#include "bbg/error.hpp"
#include "bbg/experiment.hpp"

struct bbg_config {
  bbg::RunConfig config;
};

struct bbg_model {
  bbg::LoadedRun run;
  std::optional<bbg::DataSplits> data;  // built on first use

  const bbg::DataSplits& datasets() {
    if (!data) data = bbg::make_datasets(run.config);
    return *data;
  }
};

namespace {

thread_local std::string g_last_error;

template <typename Fn>
bbg_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return BBG_OK;
  } catch (const bbg::Error& e) {
    g_last_error = e.what();
    return static_cast<bbg_status>(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown error";
  }
  return BBG_ERR_INTERNAL;
}

void check_out(const void* p, const char* name) {
  bbg::require(p != nullptr, bbg::ErrorCode::kInvalidArgument,
               std::string(name) + " is null");
}

char* dup(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::string kv(const char* key, double value) {
  std::ostringstream out;
  out.precision(8);
  out << key << '=' << value << '\n';
  return out.str();
}

}  // namespace

extern "C" {

const char* bbg_last_error(void) { return g_last_error.c_str(); }

const char* bbg_version(void) { return "1.0.0"; }

void bbg_string_free(char* s) { std::free(s); }

bbg_status bbg_config_load(const char* path, const char* preset, bbg_config** out) {
  return guarded([&] {
    check_out(path, "path");
    check_out(out, "out");
    *out = new bbg_config{bbg::load_config(path, preset ? preset : "")};
  });
}

bbg_status bbg_config_parse(const char* text, bbg_config** out) {
  return guarded([&] {
    check_out(text, "text");
    check_out(out, "out");
    *out = new bbg_config{bbg::parse_config(text)};
  });
}

bbg_status bbg_config_set(bbg_config* config, const char* key, const char* value) {
  return guarded([&] {
    check_out(config, "config");
    check_out(key, "key");
    check_out(value, "value");
    bbg::RunConfig next = config->config;
    bbg::set_config_value(next, key, value);
    config->config = next;
  });
}

bbg_status bbg_config_serialize(const bbg_config* config, char** out) {
  return guarded([&] {
    check_out(config, "config");
    check_out(out, "out");
    *out = dup(bbg::serialize_config(config->config));
  });
}

void bbg_config_free(bbg_config* config) { delete config; }

bbg_status bbg_preset_names(char** out) {
  return guarded([&] {
    check_out(out, "out");
    std::string names;
    for (const auto& n : bbg::preset_names()) names += n + "\n";
    *out = dup(names);
  });
}

bbg_status bbg_train(const bbg_config* config, int resume, char** checkpoint_path) {
  return guarded([&] {
    check_out(config, "config");
    const std::string path = bbg::train_run(config->config, resume != 0);
    if (checkpoint_path) *checkpoint_path = dup(path);
  });
}

bbg_status bbg_model_load(const char* checkpoint_path, bbg_model** out) {
  return guarded([&] {
    check_out(checkpoint_path, "checkpoint_path");
    check_out(out, "out");
    auto* m = new bbg_model;
    try {
      m->run = bbg::load_run(checkpoint_path);
    } catch (...) {
      delete m;
      throw;
    }
    *out = m;
  });
}

void bbg_model_free(bbg_model* model) { delete model; }

uint64_t bbg_model_step(const bbg_model* model) {
  return model ? model->run.state.step : 0;
}

bbg_status bbg_model_config(const bbg_model* model, char** out) {
  return guarded([&] {
    check_out(model, "model");
    check_out(out, "out");
    *out = dup(bbg::serialize_config(model->run.config));
  });
}

bbg_status bbg_model_use_ema(bbg_model* model, int use_ema) {
  return guarded([&] {
    check_out(model, "model");
    model->run.config.eval.ema = use_ema != 0;
  });
}

bbg_status bbg_eval_probe(bbg_model* model, char** out) {
  return guarded([&] {
    check_out(model, "model");
    check_out(out, "out");
    const bbg::ProbeResult r = bbg::run_probe(model->run, model->datasets());
    *out = dup(kv("probe_top1", r.val.top1) + kv("probe_top5", r.val.top5) +
               kv("probe_lr", r.lr));
  });
}

bbg_status bbg_eval_knn(bbg_model* model, const size_t* ks, size_t num_ks,
                        bbg_knn_metric metric, char** out) {
  return guarded([&] {
    check_out(model, "model");
    check_out(out, "out");
    bbg::require(num_ks > 0 && ks != nullptr, bbg::ErrorCode::kInvalidArgument,
                 "no k values given");
    bbg::require(metric == BBG_KNN_L1 || metric == BBG_KNN_L2,
                 bbg::ErrorCode::kInvalidArgument, "metric must be l1 or l2");
    const auto m = static_cast<bbg::KnnMetric>(metric);
    const auto results = bbg::run_knn(model->run, model->datasets(),
                                      std::vector<std::size_t>(ks, ks + num_ks), m);
    *out = dup(bbg::knn_csv(results, m));
  });
}

bbg_status bbg_reconstruct(bbg_model* model, size_t iters, const char* grid_path,
                           char** out) {
  return guarded([&] {
    check_out(model, "model");
    check_out(out, "out");
    const bbg::RelL1 r = bbg::run_reconstruction(model->run, model->datasets(), iters,
                                                 grid_path ? grid_path : "");
    *out = dup(kv("rel_l1", r.ratio) + kv("rel_l1_percent", r.percent()));
  });
}

bbg_status bbg_sample(bbg_model* model, size_t n, const char* path) {
  return guarded([&] {
    check_out(model, "model");
    check_out(path, "path");
    bbg::run_samples(model->run, n, path);
  });
}

bbg_status bbg_export_filters(bbg_model* model, const char* path) {
  return guarded([&] {
    check_out(model, "model");
    check_out(path, "path");
    bbg::require(model->run.config.train.flags.use_encoder,
                 bbg::ErrorCode::kInvalidArgument, "model has no encoder");
    bbg::export_first_layer_filters(bbg::eval_models(model->run).E, path);
  });
}

bbg_status bbg_generation_metrics(bbg_model* model, char** out) {
  return guarded([&] {
    check_out(model, "model");
    check_out(out, "out");
    const bbg::GenerationMetrics g =
        bbg::run_generation_metrics(model->run, model->datasets());
    *out = dup(kv("frechet", g.frechet) + kv("classifier_score", g.classifier_score) +
               kv("classifier_accuracy", g.classifier_accuracy));
  });
}

bbg_status bbg_ablate(const char* grid_path, char** out) {
  return guarded([&] {
    check_out(grid_path, "grid_path");
    const auto rows = bbg::run_ablation(bbg::load_grid(grid_path));
    if (out) *out = dup(bbg::ablation_csv(rows));
  });
}

}  // extern "C"
