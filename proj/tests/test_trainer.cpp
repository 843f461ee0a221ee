#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "bbg/data.hpp"
#include "bbg/trainer.hpp"
#include "helpers.hpp"

using namespace bbg;
using testing::error_code;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.arch.e_width = 4;
  c.arch.g_width = 6;
  c.arch.d_width = 4;
  c.arch.e_mlp_width = 16;
  c.arch.d_mlp_width = 16;
  c.arch.e_mlp_blocks = 1;
  c.arch.d_mlp_blocks = 1;
  c.arch.latent.dim = 8;
  c.arch.latent.groups = 2;
  c.batch = 4;
  c.seed = 3;
  return c;
}

const Dataset& shapes() {
  static const Dataset d = synth_dataset(SynthKind::kShapes, 48, 1, 32);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("bbg_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_tree(const ParamTree& a, const ParamTree& b) {
  if (a.names() != b.names()) return false;
  for (const auto& [name, p] : a) {
    const Param& q = b.at(name);
    if (!(p.value == q.value) || p.ema != q.ema || !(p.sn_u == q.sn_u) || !(p.sn_v == q.sn_v))
      return false;
  }
  return true;
}

bool values_changed(const ParamTree& a, const ParamTree& b) {
  for (const auto& [name, p] : a)
    if (p.trainable && !(p.value == b.at(name).value)) return true;
  return false;
}

Tensor sample_images(TrainState& s, const TrainConfig& c) {
  Tape t;
  Rng rng(99);
  Binder g(t, s.G, {false, NormMode::kTrain, false});
  return generate(g, t.constant(sample_prior(c.arch.latent, 4, rng)), c.arch).value();
}

}  // namespace

TEST_CASE("adam first step closed form") {
  ParamTree p;
  p.add("w", Tensor::from({2}, {0.5, -1.0}));
  AdamState st;
  AdamConfig cfg{0.9, 0.999, 1e-8};
  adam_step(p, {{"w", Tensor({2}, 1.0)}}, st, 0.001, cfg);
  CHECK(st.t == 1);
  CHECK(p.at("w").value[0] == doctest::Approx(0.5 - 0.001 / (1 + 1e-8)).epsilon(1e-15));
  CHECK(p.at("w").value[1] == doctest::Approx(-1.0 - 0.001 / (1 + 1e-8)).epsilon(1e-15));
}

TEST_CASE("adam with zero gradient") {
  ParamTree p;
  p.add("w", Tensor::from({1}, {2.0}));
  AdamState st;
  AdamConfig cfg{0.9, 0.999, 1e-8};
  adam_step(p, {{"w", Tensor({1}, 0.0)}}, st, 0.1, cfg);
  CHECK(p.at("w").value[0] == 2.0);

  adam_step(p, {{"w", Tensor({1}, 3.0)}}, st, 0.1, cfg);
  const double m = st.m.at("w")[0], v = st.v.at("w")[0];
  adam_step(p, {{"w", Tensor({1}, 0.0)}}, st, 0.1, cfg);
  CHECK(st.m.at("w")[0] == doctest::Approx(0.9 * m).epsilon(1e-15));
  CHECK(st.v.at("w")[0] == doctest::Approx(0.999 * v).epsilon(1e-15));
  CHECK(st.t == 3);
}

TEST_CASE("adam ten-step scalar trajectory") {
  const double grads[] = {0.3, -1.2, 0.8, 0.05, -0.4, 2.0, -2.5, 0.6, 0.0, 1.1};
  for (double beta1 : {0.0, 0.9}) {
    const double beta2 = 0.999, eps = 1e-8, lr = 0.01;
    // Hand-rolled oracle.
    double th = 0.7, m = 0, v = 0;
    ParamTree p;
    p.add("w", Tensor::from({1}, {0.7}));
    AdamState st;
    for (int t = 1; t <= 10; ++t) {
      const double g = grads[t - 1];
      m = beta1 * m + (1 - beta1) * g;
      v = beta2 * v + (1 - beta2) * g * g;
      th -= lr * (m / (1 - std::pow(beta1, t))) / (std::sqrt(v / (1 - std::pow(beta2, t))) + eps);
      adam_step(p, {{"w", Tensor::from({1}, {g})}}, st, lr, {beta1, beta2, eps});
      CHECK(std::abs(p.at("w").value[0] - th) < 1e-7);
    }
  }
}

TEST_CASE("adam rejects non-finite gradients without side effects") {
  ParamTree p;
  p.add("a", Tensor({2}, 1.0));
  p.add("b", Tensor({2}, 1.0));
  AdamState st;
  adam_step(p, {{"a", Tensor({2}, 0.5)}, {"b", Tensor({2}, 0.5)}}, st, 0.1, {});
  const ParamTree before = p;
  const AdamState st_before = st;
  Tensor bad({2}, 1.0);
  bad[1] = std::nan("");
  CHECK(error_code([&] { adam_step(p, {{"a", Tensor({2}, 0.5)}, {"b", bad}}, st, 0.1, {}); }) ==
        ErrorCode::kNonFinite);
  CHECK(same_tree(p, before));
  CHECK(st.t == st_before.t);
  CHECK(st.m.at("a") == st_before.m.at("a"));
}

TEST_CASE("config validation") {
  TrainConfig c = tiny_config();
  c.eta_E = 0.5;
  CHECK(error_code([&] { c.validate(); }) == ErrorCode::kInvalidArgument);
  c = tiny_config();
  c.ema_decay = 1.0;
  CHECK(error_code([&] { c.validate(); }) == ErrorCode::kInvalidArgument);
  c = tiny_config();
  c.d_steps_per_eg = 0;
  CHECK(error_code([&] { c.validate(); }) == ErrorCode::kInvalidArgument);
  c = tiny_config();
  c.flags.use_encoder = false;
  c.flags.use_unary_z = false;
  c.flags.use_joint = false;
  c.validate();
  CHECK(!c.arch.use_encoder);
}

TEST_CASE("zero learning rates leave weights and move shadows") {
  TrainConfig c = tiny_config();
  c.lr_D = c.lr_G = 0.0;
  c.ema_decay = 0.5;
  c.storage = Storage::kF64;
  Trainer tr(c, shapes());
  // Offset one shadow so the pull toward the weights is visible.
  Param& w = tr.state().G.at("stem.w");
  *w.ema = Tensor(w.value.shape(), 0.25);
  const TrainState before = tr.state();
  tr.train_step();
  CHECK(!values_changed(tr.state().E, before.E));
  CHECK(!values_changed(tr.state().G, before.G));
  CHECK(!values_changed(tr.state().D, before.D));
  const Tensor& s = *tr.state().G.at("stem.w").ema;
  const Tensor& p = tr.state().G.at("stem.w").value;
  for (std::size_t i = 0; i < s.size(); ++i)
    CHECK(s[i] == doctest::Approx(0.5 * 0.25 + 0.5 * p[i]).epsilon(1e-14));
}

TEST_CASE("EMA closed form for frozen parameters") {
  TrainConfig c = tiny_config();
  c.lr_D = c.lr_G = 0.0;
  c.ema_decay = 0.9;
  c.storage = Storage::kF64;
  Trainer tr(c, shapes());
  Param& w = tr.state().E.at("head.out.w");
  const Tensor s0 = testing::random_tensor(w.value.shape(), 4);
  *w.ema = s0;
  const int n = 6;
  for (int i = 0; i < n; ++i) tr.train_step();
  const Param& after = tr.state().E.at("head.out.w");
  for (std::size_t i = 0; i < s0.size(); ++i) {
    const double pv = after.value[i];
    CHECK((*after.ema)[i] == doctest::Approx(pv + (s0[i] - pv) * std::pow(0.9, n)).epsilon(1e-12));
  }
}

TEST_CASE("encoder learning-rate multiplier") {
  // With beta1 = 0 the first Adam step is -lr * g / (|g| + eps), so identical
  // gradients give E updates that differ exactly by the multiplier.
  auto run = [](double eta) {
    TrainConfig c = tiny_config();
    c.eta_E = eta;
    c.lr_G = 1e-4;
    c.storage = Storage::kF64;
    Trainer tr(c, shapes());
    const TrainState before = tr.state();
    tr.encoder_generator_step();
    CHECK(tr.state().opt_E.t == 1);
    CHECK(tr.state().opt_G.t == 1);
    return std::make_pair(before, tr.state());
  };
  auto [b1, a1] = run(1.0);
  auto [b10, a10] = run(10.0);
  CHECK(same_tree(b1.E, b10.E));
  std::size_t moved = 0;
  for (const auto& [name, p] : a1.E) {
    if (!p.trainable) continue;
    const Tensor& p0 = b1.E.at(name).value;
    const Tensor& p10 = a10.E.at(name).value;
    for (std::size_t i = 0; i < p0.size(); ++i) {
      const double d1 = p.value[i] - p0[i], d10 = p10[i] - p0[i];
      if (d1 != 0.0) ++moved;
      CHECK(d10 == doctest::Approx(10.0 * d1).epsilon(1e-9));
    }
  }
  CHECK(moved > 0);
  for (const auto& [name, p] : a1.G)
    if (p.trainable) CHECK(p.value == a10.G.at(name).value);
}

TEST_CASE("update exclusivity") {
  TrainConfig c = tiny_config();
  Trainer tr(c, shapes());
  TrainState before = tr.state();
  tr.discriminator_step();
  CHECK(same_tree(tr.state().E, before.E));
  CHECK(same_tree(tr.state().G, before.G));
  CHECK(values_changed(tr.state().D, before.D));
  CHECK(tr.state().opt_E.t == 0);
  CHECK(tr.state().opt_G.t == 0);

  before = tr.state();
  tr.encoder_generator_step();
  CHECK(same_tree(tr.state().D, before.D));
  CHECK(values_changed(tr.state().E, before.E));
  CHECK(values_changed(tr.state().G, before.G));
  CHECK(tr.state().opt_D.t == 1);
}

TEST_CASE("train step runs the configured schedule") {
  TrainConfig c = tiny_config();
  c.d_steps_per_eg = 3;
  Trainer tr(c, shapes());
  tr.train_step();
  CHECK(tr.state().opt_D.t == 3);
  CHECK(tr.state().opt_G.t == 1);
  CHECK(tr.state().opt_E.t == 1);
  CHECK(tr.state().step == 1);
}

TEST_CASE("random draw budget per sub-step") {
  for (bool with_e : {true, false}) {
    CAPTURE(with_e);
    TrainConfig c = tiny_config();
    if (!with_e) {
      c.flags.use_encoder = false;
      c.flags.use_unary_z = false;
      c.flags.use_joint = false;
    }
    Trainer tr(c, shapes());
    Rng mirror = tr.state().rng;
    const std::size_t noise = c.batch * c.arch.latent.dim;
    auto real_batch = [&] {
      std::uniform_int_distribution<std::size_t> pick(0, shapes().size() - 1);
      for (std::size_t i = 0; i < c.batch; ++i) pick(mirror);
      for (std::size_t i = 0; i < c.batch; ++i) mirror();  // crop seeds
    };
    auto normals = [&](std::size_t n) {
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t i = 0; i < n; ++i) normal(mirror);
    };

    // D always sees real images; encoder noise only with an encoder.
    tr.discriminator_step();
    real_batch();
    if (with_e) normals(noise);
    normals(noise);
    CHECK(bool(mirror == tr.state().rng));

    // Without an encoder the E/G step draws only the prior.
    tr.encoder_generator_step();
    if (with_e) {
      real_batch();
      normals(noise);
    }
    normals(noise);
    CHECK(bool(mirror == tr.state().rng));
  }
}

TEST_CASE("checkpoint round trip") {
  TrainConfig c = tiny_config();
  Trainer tr(c, shapes());
  for (int i = 0; i < 3; ++i) tr.train_step();
  const fs::path dir = scratch("roundtrip");
  const std::string a = (dir / "a.bbgn").string(), b = (dir / "b.bbgn").string();
  save_checkpoint(a, tr.state(), "echo=1\n");
  NamedTensors entries = read_named_tensors(a);
  CHECK(config_text_from_tensors(entries) == "echo=1\n");
  TrainState loaded = state_from_tensors(c, entries);
  save_checkpoint(b, loaded, "echo=1\n");
  CHECK(slurp(a) == slurp(b));

  CHECK(loaded.step == 3);
  CHECK(bool(loaded.rng == tr.state().rng));
  CHECK(same_tree(loaded.E, tr.state().E));
  CHECK(same_tree(loaded.G, tr.state().G));
  CHECK(same_tree(loaded.D, tr.state().D));
  CHECK(sample_images(loaded, c) == sample_images(tr.state(), c));
}

TEST_CASE("checkpoint layout") {
  const fs::path dir = scratch("layout");
  const std::string path = (dir / "x.bbgn").string();
  write_named_tensors(path, {{"ab", Tensor::from({2}, {1.5, -2.0})}});
  const std::string bytes = slurp(path);
  // magic, version, count, name len, name, rank, extent, 2 floats
  REQUIRE(bytes.size() == 4 + 4 + 8 + 4 + 2 + 4 + 8 + 8);
  CHECK(bytes.substr(0, 4) == "BBGN");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(bytes.substr(20, 2) == "ab");
  float f;
  std::memcpy(&f, bytes.data() + 34, 4);
  CHECK(f == 1.5f);
}

TEST_CASE("checkpoint format errors") {
  const fs::path dir = scratch("errors");
  const std::string path = (dir / "bad.bbgn").string();
  std::ofstream(path) << "NOPE";
  CHECK(error_code([&] { read_named_tensors(path); }) == ErrorCode::kFormat);
  CHECK(error_code([&] { read_named_tensors((dir / "missing").string()); }) == ErrorCode::kIo);

  write_named_tensors(path, {{"ab", Tensor({3}, 1.0)}});
  std::string bytes = slurp(path);
  std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 2);
  CHECK(error_code([&] { read_named_tensors(path); }) == ErrorCode::kFormat);

  // Missing tensors are reported.
  TrainConfig c = tiny_config();
  NamedTensors partial = state_to_tensors(init_state(c), "");
  partial.pop_back();
  CHECK(error_code([&] { state_from_tensors(c, partial); }) == ErrorCode::kFormat);
}

TEST_CASE("smoke run writes metrics and a loadable checkpoint") {
  TrainConfig c = tiny_config();
  c.total_steps = 10;
  c.eval_every = 1;
  const fs::path dir = scratch("smoke");
  Trainer tr(c, shapes());
  run_training(tr, {dir.string(), "cfg\n", {}, {}});
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 11);
  std::string header;
  for (const auto& col : metrics_columns()) header += (header.empty() ? "" : ",") + col;
  CHECK(lines[0] == header);
  CHECK(lines[10].rfind("10,", 0) == 0);
  TrainState s = state_from_tensors(c, read_named_tensors((dir / "final.bbgn").string()));
  CHECK(s.step == 10);
}

TEST_CASE("resume matches an uninterrupted run") {
  TrainConfig c = tiny_config();
  c.total_steps = 6;
  c.eval_every = 1;
  const fs::path full = scratch("full"), split = scratch("split");
  {
    Trainer tr(c, shapes());
    run_training(tr, {full.string(), "cfg\n", {}, {}});
  }
  {
    TrainConfig half = c;
    half.total_steps = 3;
    Trainer tr(half, shapes());
    run_training(tr, {split.string(), "cfg\n", {}, {}});
  }
  {
    TrainState s = state_from_tensors(c, read_named_tensors((split / "final.bbgn").string()));
    Trainer tr(c, shapes(), std::move(s));
    run_training(tr, {split.string(), "cfg\n", {}, {}});
  }
  CHECK(slurp(full / "metrics.csv") == slurp(split / "metrics.csv"));
  CHECK(slurp(full / "final.bbgn") == slurp(split / "final.bbgn"));
}

TEST_CASE("identical runs give identical metrics") {
  TrainConfig c = tiny_config();
  c.total_steps = 4;
  c.eval_every = 1;
  c.checkpoint_every = 2;
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  for (const auto& dir : {a, b}) {
    Trainer tr(c, shapes());
    run_training(tr, {dir.string(), "", {"extra"}, [](const TrainState& s) {
                        return std::vector<double>{double(s.step) / 2};
                      }});
  }
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(fs::exists(a / "checkpoint_2.bbgn"));
  CHECK(!fs::exists(a / "checkpoint_4.bbgn"));
  std::ifstream csv(a / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.substr(header.size() - 6) == ",extra");
}

TEST_CASE("divergence aborts with score statistics") {
  TrainConfig c = tiny_config();
  Trainer tr(c, shapes());
  tr.state().D.at("f.proj.b").value[0] = std::nan("");
  try {
    tr.train_step();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNonFinite);
    const std::string msg = e.what();
    CHECK(msg.find("diverged") != std::string::npos);
    CHECK(msg.find("score means") != std::string::npos);
  }
}

TEST_CASE("float32 storage keeps state representable") {
  TrainConfig c = tiny_config();
  Trainer tr(c, shapes());
  tr.train_step();
  for (const auto& [name, p] : tr.state().G) {
    for (double v : p.value.data()) CHECK(double(float(v)) == v);
    if (p.ema)
      for (double v : p.ema->data()) CHECK(double(float(v)) == v);
  }
  for (const auto& [name, m] : tr.state().opt_D.v)
    for (double v : m.data()) CHECK(double(float(v)) == v);
}

TEST_CASE("discriminator loss falls on a two-mode toy set") {
  TrainConfig c = tiny_config();
  c.batch = 16;
  c.augment = AugmentMode::kNone;
  const Dataset data = synth_dataset(SynthKind::kGaussianBlobs, 256, 5, 16, 2);
  Trainer tr(c, data);
  auto window = [&](int n) {
    double s = 0;
    for (int i = 0; i < n; ++i) s += tr.train_step().d.loss_D;
    return s / n;
  };
  const double initial = window(10);
  for (int i = 0; i < 1980; ++i) tr.train_step();
  const double late = window(10);
  MESSAGE("L_D initial " << initial << " late " << late);
  CHECK(late < initial);
}
