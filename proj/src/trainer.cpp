#include "bbg/trainer.hpp"

#include <algorithm>
#include <bit>
#include <memory>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "bbg/error.hpp"

namespace bbg {
namespace {

constexpr char kMagic[4] = {'B', 'B', 'G', 'N'};
constexpr std::uint32_t kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(in.good(), ErrorCode::kFormat, "'" + path + "': truncated checkpoint");
  return v;
}

// u64 values travel as four exact 16-bit chunks.
Tensor encode_u64(const std::vector<std::uint64_t>& values) {
  Tensor t({values.size(), 4});
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k)
      t[i * 4 + k] = static_cast<double>((values[i] >> (16 * k)) & 0xFFFF);
  return t;
}

std::vector<std::uint64_t> decode_u64(const Tensor& t) {
  require(t.rank() == 2 && t.dim(1) == 4, ErrorCode::kFormat,
          "malformed integer tensor");
  std::vector<std::uint64_t> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t k = 0; k < 4; ++k)
      out[i] |= static_cast<std::uint64_t>(t[i * 4 + k]) << (16 * k);
  return out;
}

Tensor encode_text(const std::string& s) {
  Tensor t({s.size()});
  for (std::size_t i = 0; i < s.size(); ++i)
    t[i] = static_cast<unsigned char>(s[i]);
  return t;
}

std::string decode_text(const Tensor& t) {
  std::string s(t.size(), '\0');
  for (std::size_t i = 0; i < t.size(); ++i)
    s[i] = static_cast<char>(static_cast<unsigned char>(t[i]));
  return s;
}

Tensor encode_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  std::istringstream in(out.str());
  std::vector<std::uint64_t> words;
  std::uint64_t w;
  while (in >> w) words.push_back(w);
  return encode_u64(words);
}

Rng decode_rng(const Tensor& t) {
  std::ostringstream text;
  for (auto w : decode_u64(t)) text << w << ' ';
  Rng rng;
  std::istringstream in(text.str());
  in >> rng;
  require(!in.fail(), ErrorCode::kFormat, "malformed rng state");
  return rng;
}

void quantize_tree(ParamTree& tree) {
  for (auto& [name, p] : tree) {
    quantize_f32(p.value);
    if (p.ema) quantize_f32(*p.ema);
    if (p.spectral_norm) {
      quantize_f32(p.sn_u);
      quantize_f32(p.sn_v);
    }
  }
}

void quantize_adam(AdamState& s) {
  for (auto& [n, t] : s.m) quantize_f32(t);
  for (auto& [n, t] : s.v) quantize_f32(t);
}

void add_tree(NamedTensors& out, const std::string& prefix,
              const ParamTree& tree) {
  for (const auto& [name, p] : tree) {
    out.emplace_back(prefix + "/" + name, p.value);
    if (p.ema) out.emplace_back(prefix + "/" + name + "@ema", *p.ema);
    if (p.spectral_norm) {
      out.emplace_back(prefix + "/" + name + "@sn_u", p.sn_u);
      out.emplace_back(prefix + "/" + name + "@sn_v", p.sn_v);
    }
  }
}

void add_adam(NamedTensors& out, const std::string& prefix,
              const AdamState& s) {
  out.emplace_back(prefix + "/t", encode_u64({s.t}));
  for (const auto& [n, t] : s.m) out.emplace_back(prefix + "/m/" + n, t);
  for (const auto& [n, t] : s.v) out.emplace_back(prefix + "/v/" + n, t);
}

class EntryIndex {
 public:
  explicit EntryIndex(const NamedTensors& entries) {
    for (std::size_t i = 0; i < entries.size(); ++i)
      index_[entries[i].first] = &entries[i].second;
  }

  bool contains(const std::string& name) const { return index_.count(name); }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorCode::kFormat,
            "checkpoint is missing '" + name + "'");
    return *it->second;
  }

  Tensor get_like(const std::string& name, const Tensor& like) const {
    const Tensor& t = get(name);
    require(t.shape() == like.shape(), ErrorCode::kFormat,
            "checkpoint tensor '" + name + "' has shape " +
                shape_string(t.shape()) + ", expected " +
                shape_string(like.shape()));
    return t;
  }

  std::vector<std::string> with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, t] : index_)
      if (name.rfind(prefix, 0) == 0) out.push_back(name.substr(prefix.size()));
    return out;
  }

 private:
  std::map<std::string, const Tensor*> index_;
};

void restore_tree(const EntryIndex& idx, const std::string& prefix,
                  ParamTree& tree) {
  for (auto& [name, p] : tree) {
    const std::string key = prefix + "/" + name;
    p.value = idx.get_like(key, p.value);
    if (p.ema) p.ema = idx.get_like(key + "@ema", *p.ema);
    if (p.spectral_norm) {
      p.sn_u = idx.get_like(key + "@sn_u", p.sn_u);
      p.sn_v = idx.get_like(key + "@sn_v", p.sn_v);
    }
  }
}

void restore_adam(const EntryIndex& idx, const std::string& prefix,
                  const ParamTree& tree, AdamState& s) {
  s.t = decode_u64(idx.get(prefix + "/t")).at(0);
  s.m.clear();
  s.v.clear();
  for (const auto& name : idx.with_prefix(prefix + "/m/"))
    s.m[name] = idx.get_like(prefix + "/m/" + name, tree.at(name).value);
  for (const auto& name : idx.with_prefix(prefix + "/v/"))
    s.v[name] = idx.get_like(prefix + "/v/" + name, tree.at(name).value);
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(9) << v;
  return out.str();
}

}  // namespace

void adam_step(ParamTree& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    require(g.all_finite(), ErrorCode::kNonFinite,
            "non-finite gradient for '" + name + "'; update aborted");
    require(g.shape() == params.at(name).value.shape(),
            ErrorCode::kShapeMismatch, "gradient shape for '" + name + "'");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, g] : grads) {
    Param& p = params.at(name);
    if (!p.trainable) continue;
    Tensor& m = state.m.try_emplace(name, g.shape()).first->second;
    Tensor& v = state.v.try_emplace(name, g.shape()).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      // beta1 = 0 makes bc1 = 1; guard the t-th power for beta1 = 1 misuse.
      const double m_hat = bc1 > 0 ? m[i] / bc1 : m[i];
      const double v_hat = v[i] / bc2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

void TrainConfig::validate() {
  flags.validate();
  arch.use_encoder = flags.use_encoder;
  arch.validate();
  require(eta_E >= 1.0, ErrorCode::kInvalidArgument, "eta_E must be >= 1");
  require(d_steps_per_eg >= 1, ErrorCode::kInvalidArgument,
          "d_steps_per_eg must be >= 1");
  require(ema_decay >= 0.0 && ema_decay < 1.0, ErrorCode::kInvalidArgument,
          "ema_decay must be in [0, 1)");
  require(batch >= 2, ErrorCode::kInvalidArgument,
          "batch must be >= 2 (batch statistics)");
  require(lr_D >= 0.0 && lr_G >= 0.0, ErrorCode::kInvalidArgument,
          "learning rates must be non-negative");
  require(eval_every >= 1, ErrorCode::kInvalidArgument,
          "eval_every must be >= 1");
}

TrainState init_state(const TrainConfig& config) {
  TrainConfig c = config;
  c.validate();
  TrainState s;
  s.rng.seed(c.seed);
  Rng init(c.seed ^ 0x9E3779B97F4A7C15ull);
  if (c.flags.use_encoder) s.E = init_encoder(c.arch, init);
  s.G = init_generator(c.arch, init);
  s.D = init_discriminator(c.arch, init);
  if (c.storage == Storage::kF32) {
    quantize_tree(s.E);
    quantize_tree(s.G);
    quantize_tree(s.D);
  }
  return s;
}

Trainer::Trainer(TrainConfig config, const Dataset& data)
    : Trainer(config, data, init_state(config)) {}

Trainer::Trainer(TrainConfig config, const Dataset& data, TrainState state)
    : config_(std::move(config)), data_(data), state_(std::move(state)) {
  config_.validate();
  require(data_.size() >= 1, ErrorCode::kInvalidArgument, "empty dataset");
  require(data_.channels() == config_.arch.channels,
          ErrorCode::kShapeMismatch, "dataset channel count differs from arch");
}

Tensor Trainer::real_batch() {
  std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
  std::vector<std::size_t> rows(config_.batch);
  for (auto& r : rows) r = pick(state_.rng);
  AugmentSpec spec{config_.augment, config_.arch.e_resolution};
  return augment_batch(data_.batch(rows), spec, state_.rng);
}

LossReport Trainer::discriminator_step() {
  const ArchConfig& a = config_.arch;
  const bool with_e = config_.flags.use_encoder;
  Tape tape;
  Binder d(tape, state_.D, {true, NormMode::kTrain, true});
  Binder g(tape, state_.G, {false, NormMode::kTrain, false});

  Var x = tape.constant(real_batch());
  ScoreTriple enc;
  if (with_e) {
    Binder e(tape, state_.E, {false, NormMode::kTrain, false});
    Var z_hat = encode(e, x, a, &state_.rng).z;
    enc = discriminate(d, to_d_resolution(x, a), z_hat, a);
  } else {
    enc = discriminate(d, to_d_resolution(x, a), Var(), a);
  }
  Var z = tape.constant(sample_prior(a.latent, config_.batch, state_.rng));
  ScoreTriple gen = discriminate(d, generate(g, z, a), with_e ? z : Var(), a);

  Var loss = loss_D(enc, gen, config_.flags);
  adam_step(state_.D, d.gradients(tape.backward(loss)), state_.opt_D,
            config_.lr_D, config_.adam);
  return batch_losses(enc, gen, config_.flags);
}

LossReport Trainer::encoder_generator_step() {
  const ArchConfig& a = config_.arch;
  const bool with_e = config_.flags.use_encoder;
  Tape tape;
  Binder d(tape, state_.D, {false, NormMode::kTrain, false});
  Binder g(tape, state_.G, {true, NormMode::kTrain, true});

  ScoreTriple enc;
  std::map<std::string, Tensor> e_grads;
  std::unique_ptr<Binder> e;
  if (with_e) {
    e = std::make_unique<Binder>(tape, state_.E,
                                 BindOptions{true, NormMode::kTrain, true});
    Var x = tape.constant(real_batch());
    Var z_hat = encode(*e, x, a, &state_.rng).z;
    enc = discriminate(d, to_d_resolution(x, a), z_hat, a);
  }
  Var z = tape.constant(sample_prior(a.latent, config_.batch, state_.rng));
  ScoreTriple gen = discriminate(d, generate(g, z, a), with_e ? z : Var(), a);

  Var loss = loss_EG(enc, gen, config_.flags);
  const Gradients grads = tape.backward(loss);
  if (e) {
    adam_step(state_.E, e->gradients(grads), state_.opt_E,
              config_.eta_E * config_.lr_G, config_.adam);
  }
  adam_step(state_.G, g.gradients(grads), state_.opt_G, config_.lr_G,
            config_.adam);
  state_.E.update_ema(config_.ema_decay);
  state_.G.update_ema(config_.ema_decay);
  return batch_losses(enc, gen, config_.flags);
}

void Trainer::finish_step() {
  ++state_.step;
  if (config_.storage != Storage::kF32) return;
  quantize_tree(state_.E);
  quantize_tree(state_.G);
  quantize_tree(state_.D);
  quantize_adam(state_.opt_E);
  quantize_adam(state_.opt_G);
  quantize_adam(state_.opt_D);
}

StepReport Trainer::train_step() {
  StepReport r;
  try {
    for (std::size_t i = 0; i < config_.d_steps_per_eg; ++i)
      r.d = discriminator_step();
    r.eg = encoder_generator_step();
  } catch (const Error& err) {
    if (err.code() != ErrorCode::kNonFinite) throw;
    std::ostringstream msg;
    msg << "training diverged at step " << state_.step << ": " << err.what()
        << " (last D-step score means: real s_x=" << r.d.enc.x.raw
        << " s_z=" << r.d.enc.z.raw << " s_xz=" << r.d.enc.xz.raw
        << ", gen s_x=" << r.d.gen.x.raw << " s_z=" << r.d.gen.z.raw
        << " s_xz=" << r.d.gen.xz.raw << ")";
    fail(ErrorCode::kNonFinite, msg.str());
  }
  finish_step();
  return r;
}

void write_named_tensors(const std::string& path, const NamedTensors& entries) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write '" + path + "'");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, entries.size());
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<float>(out, static_cast<float>(v));
  }
  require(out.good(), ErrorCode::kIo, "write to '" + path + "' failed");
}

NamedTensors read_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::equal(magic, magic + 4, kMagic), ErrorCode::kFormat,
          "'" + path + "' is not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, path);
  require(version == kFormatVersion, ErrorCode::kFormat,
          "'" + path + "': unsupported format version " +
              std::to_string(version));
  const auto count = get<std::uint64_t>(in, path);
  NamedTensors entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    in.read(name.data(), len);
    require(in.good(), ErrorCode::kFormat, "'" + path + "': truncated name");
    const auto rank = get<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = get<std::uint64_t>(in, path);
    Tensor t(shape);
    for (auto& v : t.data()) v = get<float>(in, path);
    entries.emplace_back(std::move(name), std::move(t));
  }
  in.peek();
  require(in.eof(), ErrorCode::kFormat, "'" + path + "': trailing bytes");
  return entries;
}

NamedTensors state_to_tensors(const TrainState& s,
                              const std::string& config_text) {
  NamedTensors out;
  out.emplace_back("meta/config", encode_text(config_text));
  out.emplace_back("meta/step", encode_u64({s.step}));
  out.emplace_back("meta/rng", encode_rng(s.rng));
  add_tree(out, "E", s.E);
  add_tree(out, "G", s.G);
  add_tree(out, "D", s.D);
  add_adam(out, "opt_E", s.opt_E);
  add_adam(out, "opt_G", s.opt_G);
  add_adam(out, "opt_D", s.opt_D);
  return out;
}

TrainState state_from_tensors(const TrainConfig& config,
                              const NamedTensors& entries) {
  TrainState s = init_state(config);
  EntryIndex idx(entries);
  s.step = decode_u64(idx.get("meta/step")).at(0);
  s.rng = decode_rng(idx.get("meta/rng"));
  restore_tree(idx, "E", s.E);
  restore_tree(idx, "G", s.G);
  restore_tree(idx, "D", s.D);
  if (config.flags.use_encoder) restore_adam(idx, "opt_E", s.E, s.opt_E);
  restore_adam(idx, "opt_G", s.G, s.opt_G);
  restore_adam(idx, "opt_D", s.D, s.opt_D);
  return s;
}

std::string config_text_from_tensors(const NamedTensors& entries) {
  return decode_text(EntryIndex(entries).get("meta/config"));
}

void save_checkpoint(const std::string& path, const TrainState& state,
                     const std::string& config_text) {
  write_named_tensors(path, state_to_tensors(state, config_text));
}

std::vector<std::string> metrics_columns() {
  return {"step",        "loss_d",      "loss_eg",      "d_real_sx",
          "d_real_sz",   "d_real_sxz",  "d_gen_sx",     "d_gen_sz",
          "d_gen_sxz",   "eg_real_sx",  "eg_real_sz",   "eg_real_sxz",
          "eg_gen_sx",   "eg_gen_sz",   "eg_gen_sxz"};
}

void run_training(Trainer& trainer, const RunOptions& options) {
  namespace fs = std::filesystem;
  const TrainConfig& cfg = trainer.config();
  fs::create_directories(options.out_dir);
  const fs::path csv_path = fs::path(options.out_dir) / "metrics.csv";
  const bool resuming = trainer.state().step > 0 && fs::exists(csv_path);
  std::ofstream csv(csv_path, resuming ? std::ios::app : std::ios::trunc);
  require(csv.good(), ErrorCode::kIo, "cannot write " + csv_path.string());
  if (!resuming) {
    auto cols = metrics_columns();
    cols.insert(cols.end(), options.extra_columns.begin(),
                options.extra_columns.end());
    for (std::size_t i = 0; i < cols.size(); ++i)
      csv << (i ? "," : "") << cols[i];
    csv << '\n';
  }

  while (trainer.state().step < cfg.total_steps) {
    const StepReport r = trainer.train_step();
    const std::uint64_t step = trainer.state().step;
    if (step % cfg.eval_every == 0 || step == cfg.total_steps) {
      std::vector<double> row = {
          r.d.loss_D,     r.eg.loss_EG,   r.d.enc.x.raw,  r.d.enc.z.raw,
          r.d.enc.xz.raw, r.d.gen.x.raw,  r.d.gen.z.raw,  r.d.gen.xz.raw,
          r.eg.enc.x.raw, r.eg.enc.z.raw, r.eg.enc.xz.raw, r.eg.gen.x.raw,
          r.eg.gen.z.raw, r.eg.gen.xz.raw};
      if (options.extra_metrics) {
        auto extra = options.extra_metrics(trainer.state());
        row.insert(row.end(), extra.begin(), extra.end());
      }
      csv << step;
      for (double v : row) csv << ',' << format_double(v);
      csv << '\n';
      csv.flush();
    }
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 &&
        step != cfg.total_steps) {
      save_checkpoint(
          (fs::path(options.out_dir) / ("checkpoint_" + std::to_string(step) + ".bbgn"))
              .string(),
          trainer.state(), options.config_text);
    }
  }
  save_checkpoint((fs::path(options.out_dir) / "final.bbgn").string(),
                  trainer.state(), options.config_text);
}

}  // namespace bbg
