// Command-line front end. Talks to the library only through bbg.h.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "bbg.h"

namespace {

constexpr int kExitError = 1;
constexpr int kExitUsage = 2;

struct CStr {
  char* p = nullptr;
  ~CStr() { bbg_string_free(p); }
};

using Model = std::unique_ptr<bbg_model, decltype(&bbg_model_free)>;

int report(const char* what) {
  std::cerr << "bbg: " << what << ": " << bbg_last_error() << "\n";
  return kExitError;
}

bool load_model(const std::string& path, Model& out) {
  bbg_model* m = nullptr;
  if (bbg_model_load(path.c_str(), &m) != BBG_OK) return false;
  out.reset(m);
  return true;
}

std::string beside(const std::string& ckpt, const std::string& name) {
  return (std::filesystem::path(ckpt).parent_path() / name).string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bbg: bidirectional GAN training and evaluation"};
  app.require_subcommand(1);

  std::string config_path, preset, ckpt, grid, out, metric = "l2", knn_ks = "1,5,25,50";
  bool resume = false;
  std::size_t iters = 3, n = 64;

  auto* train = app.add_subcommand("train", "train a model from a key=value config");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--preset", preset, "ablation preset (overrides the config's)");
  train->add_flag("--resume", resume, "continue from <out_dir>/final.bbgn");

  auto* probe = app.add_subcommand("eval-probe", "linear probe on frozen encoder features");
  probe->add_option("--ckpt", ckpt, "checkpoint")->required();

  auto* knn = app.add_subcommand("eval-knn", "k-NN classification; one CSV row per k");
  knn->add_option("--ckpt", ckpt, "checkpoint")->required();
  knn->add_option("--k", knn_ks, "comma-separated k values")->capture_default_str();
  knn->add_option("--metric", metric, "l1 or l2")
      ->check(CLI::IsMember({"l1", "l2"}))
      ->capture_default_str();

  auto* recon = app.add_subcommand("reconstruct", "reconstruction error and iterate grid");
  recon->add_option("--ckpt", ckpt, "checkpoint")->required();
  recon->add_option("--iters", iters, "reconstruction iterations")->capture_default_str();
  recon->add_option("--out", out, "grid image (PPM)");

  auto* sample = app.add_subcommand("sample", "write a grid of generated samples");
  sample->add_option("--ckpt", ckpt, "checkpoint")->required();
  sample->add_option("--n", n, "number of samples")->capture_default_str();
  sample->add_option("--out", out, "grid image (PPM)");

  auto* filters = app.add_subcommand("filters", "export first-layer encoder filters");
  filters->add_option("--ckpt", ckpt, "checkpoint")->required();
  filters->add_option("--out", out, "grid image (PPM)");

  auto* metrics = app.add_subcommand("metrics", "Frechet distance and classifier score");
  metrics->add_option("--ckpt", ckpt, "checkpoint")->required();

  auto* ablate = app.add_subcommand("ablate", "train and evaluate a preset grid");
  ablate->add_option("--grid", grid, "grid file")->required();

  bool raw = false;
  for (auto* sub : {probe, knn, recon, sample, filters, metrics})
    sub->add_flag("--raw-weights", raw, "evaluate raw E/G weights instead of the EMA");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "bbg: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  if (train->parsed()) {
    if (!std::filesystem::exists(config_path)) {
      std::cerr << "bbg: config file '" << config_path << "' not found\n";
      return kExitUsage;
    }
    bbg_config* cfg = nullptr;
    if (bbg_config_load(config_path.c_str(), preset.empty() ? nullptr : preset.c_str(),
                        &cfg) != BBG_OK) {
      std::cerr << "bbg: bad config: " << bbg_last_error() << "\n";
      return kExitUsage;
    }
    std::unique_ptr<bbg_config, decltype(&bbg_config_free)> guard(cfg, bbg_config_free);
    CStr path;
    if (bbg_train(cfg, resume ? 1 : 0, &path.p) != BBG_OK) return report("train");
    std::cout << "checkpoint=" << path.p << "\n";
    return 0;
  }

  if (ablate->parsed()) {
    CStr csv;
    if (bbg_ablate(grid.c_str(), &csv.p) != BBG_OK) return report("ablate");
    std::cout << csv.p;
    return 0;
  }

  Model model(nullptr, bbg_model_free);
  if (!load_model(ckpt, model)) return report("load checkpoint");
  if (raw && bbg_model_use_ema(model.get(), 0) != BBG_OK) return report("raw weights");
  CStr text;
  bbg_status st = BBG_OK;

  if (probe->parsed()) {
    st = bbg_eval_probe(model.get(), &text.p);
  } else if (knn->parsed()) {
    std::vector<size_t> ks;
    std::string item;
    std::stringstream in(knn_ks);
    while (std::getline(in, item, ',')) {
      try {
        std::size_t used = 0;
        const unsigned long k = std::stoul(item, &used);
        if (used != item.size() || k == 0) throw std::invalid_argument(item);
        ks.push_back(k);
      } catch (const std::exception&) {
        std::cerr << "bbg: bad --k value '" << item << "'\n\n" << app.help();
        return kExitUsage;
      }
    }
    st = bbg_eval_knn(model.get(), ks.data(), ks.size(),
                      metric == "l1" ? BBG_KNN_L1 : BBG_KNN_L2, &text.p);
  } else if (recon->parsed()) {
    if (out.empty()) out = beside(ckpt, "reconstructions.ppm");
    st = bbg_reconstruct(model.get(), iters, out.c_str(), &text.p);
  } else if (sample->parsed()) {
    if (out.empty()) out = beside(ckpt, "samples.ppm");
    st = bbg_sample(model.get(), n, out.c_str());
  } else if (filters->parsed()) {
    if (out.empty()) out = beside(ckpt, "filters.ppm");
    st = bbg_export_filters(model.get(), out.c_str());
  } else if (metrics->parsed()) {
    st = bbg_generation_metrics(model.get(), &text.p);
  }
  if (st != BBG_OK) return report(app.get_subcommands().front()->get_name().c_str());
  if (text.p) std::cout << text.p;
  if (!out.empty()) std::cout << "wrote " << out << "\n";
  return 0;
}
