#include "bbg/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "bbg/error.hpp"

namespace bbg {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == v.size() && !v.empty(), ErrorCode::kInvalidArgument,
          key + ": '" + v + "' is not a number");
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && ptr == v.data() + v.size() && !v.empty(),
          ErrorCode::kInvalidArgument,
          key + ": '" + v + "' is not a non-negative integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorCode::kInvalidArgument, key + ": expected true or false, got '" + v + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             std::initializer_list<std::pair<const char*, E>> table) {
  std::string options;
  for (const auto& [name, value] : table) {
    if (v == name) return value;
    options += options.empty() ? name : std::string("|") + name;
  }
  fail(ErrorCode::kInvalidArgument, key + ": expected " + options + ", got '" + v + "'");
}

template <typename E>
std::string enum_name(E v, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, value] : table)
    if (value == v) return name;
  return "?";
}

const std::initializer_list<std::pair<const char*, Storage>> kStorage = {
    {"f32", Storage::kF32}, {"f64", Storage::kF64}};
const std::initializer_list<std::pair<const char*, PriorKind>> kPrior = {
    {"gaussian", PriorKind::kGaussian}, {"uniform", PriorKind::kUniform}};
const std::initializer_list<std::pair<const char*, EncoderMode>> kEncoder = {
    {"stochastic", EncoderMode::kStochastic},
    {"deterministic", EncoderMode::kDeterministic},
    {"tanh", EncoderMode::kTanhDeterministic}};
const std::initializer_list<std::pair<const char*, HingeMode>> kHinge = {
    {"per-term", HingeMode::kPerTerm}, {"joint", HingeMode::kJoint}};
const std::initializer_list<std::pair<const char*, AugmentMode>> kAugment = {
    {"base", AugmentMode::kBase}, {"light", AugmentMode::kLight},
    {"none", AugmentMode::kNone}};
const std::initializer_list<std::pair<const char*, FeatureKind>> kFeatures = {
    {"avepool", FeatureKind::kAvePool}, {"bn-crelu", FeatureKind::kBnCrelu}};

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define BBG_UINT(KEY, EXPR)                                                  \
  Field {                                                                    \
    KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },          \
        [](RunConfig& c, const std::string& v) {                             \
          c.EXPR = static_cast<decltype(c.EXPR)>(parse_uint(KEY, v));        \
        }                                                                    \
  }
#define BBG_REAL(KEY, EXPR)                                                          \
  Field {                                                                            \
    KEY, [](const RunConfig& c) { return fmt_double(c.EXPR); },                      \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_double(KEY, v); }    \
  }
#define BBG_BOOL(KEY, EXPR)                                                          \
  Field {                                                                            \
    KEY, [](const RunConfig& c) { return std::string(c.EXPR ? "true" : "false"); },  \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_bool(KEY, v); }      \
  }
#define BBG_ENUM(KEY, EXPR, TABLE)                                                   \
  Field {                                                                            \
    KEY, [](const RunConfig& c) { return enum_name(c.EXPR, TABLE); },                \
        [](RunConfig& c, const std::string& v) { c.EXPR = parse_enum(KEY, v, TABLE); } \
  }
#define BBG_TEXT(KEY, EXPR)                                                          \
  Field {                                                                            \
    KEY, [](const RunConfig& c) { return c.EXPR; },                                  \
        [](RunConfig& c, const std::string& v) { c.EXPR = v; }                       \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"preset", [](const RunConfig& c) { return c.preset; },
            [](RunConfig& c, const std::string& v) { apply_preset(c, v); }},
      BBG_TEXT("out_dir", out_dir),
      BBG_UINT("seed", train.seed),
      BBG_UINT("steps", train.total_steps),
      BBG_UINT("batch", train.batch),
      BBG_REAL("lr_d", train.lr_D),
      BBG_REAL("lr_g", train.lr_G),
      BBG_REAL("eta_e", train.eta_E),
      BBG_REAL("beta1", train.adam.beta1),
      BBG_REAL("beta2", train.adam.beta2),
      BBG_REAL("adam_eps", train.adam.eps),
      BBG_UINT("d_steps_per_eg", train.d_steps_per_eg),
      BBG_REAL("ema_decay", train.ema_decay),
      BBG_UINT("eval_every", train.eval_every),
      BBG_UINT("checkpoint_every", train.checkpoint_every),
      BBG_ENUM("storage", train.storage, kStorage),
      BBG_ENUM("latent.prior", train.arch.latent.kind, kPrior),
      BBG_UINT("latent.dim", train.arch.latent.dim),
      BBG_UINT("latent.groups", train.arch.latent.groups),
      BBG_BOOL("encoder.enabled", train.flags.use_encoder),
      BBG_ENUM("encoder.mode", train.arch.encoder_mode, kEncoder),
      BBG_BOOL("loss.unary_x", train.flags.use_unary_x),
      BBG_BOOL("loss.unary_z", train.flags.use_unary_z),
      BBG_BOOL("loss.joint", train.flags.use_joint),
      BBG_ENUM("loss.hinge", train.flags.hinge_mode, kHinge),
      BBG_UINT("arch.channels", train.arch.channels),
      BBG_UINT("arch.e_resolution", train.arch.e_resolution),
      BBG_UINT("arch.g_resolution", train.arch.g_resolution),
      BBG_UINT("arch.e_width", train.arch.e_width),
      BBG_UINT("arch.e_mlp_width", train.arch.e_mlp_width),
      BBG_UINT("arch.e_mlp_blocks", train.arch.e_mlp_blocks),
      BBG_UINT("arch.g_width", train.arch.g_width),
      BBG_UINT("arch.g_upsamples", train.arch.g_upsamples),
      BBG_UINT("arch.d_width", train.arch.d_width),
      BBG_UINT("arch.d_mlp_width", train.arch.d_mlp_width),
      BBG_UINT("arch.d_mlp_blocks", train.arch.d_mlp_blocks),
      BBG_ENUM("augment.mode", train.augment, kAugment),
      BBG_TEXT("data.kind", data.kind),
      BBG_UINT("data.n", data.n),
      BBG_UINT("data.seed", data.seed),
      BBG_UINT("data.resolution", data.resolution),
      BBG_UINT("data.classes", data.classes),
      BBG_REAL("data.noise_scale", data.noise_scale),
      BBG_TEXT("data.images", data.images),
      BBG_TEXT("data.labels", data.labels),
      BBG_TEXT("data.val_images", data.val_images),
      BBG_TEXT("data.val_labels", data.val_labels),
      BBG_UINT("data.n_val", data.n_val),
      BBG_REAL("data.holdout", data.holdout),
      BBG_UINT("eval.probe_steps", eval.probe_steps),
      BBG_REAL("eval.probe_lr", eval.probe_lr),
      BBG_UINT("eval.probe_batch", eval.probe_batch),
      BBG_BOOL("eval.probe_sweep", eval.probe_sweep),
      BBG_ENUM("eval.features", eval.features, kFeatures),
      BBG_UINT("eval.classifier_steps", eval.classifier_steps),
      BBG_UINT("eval.samples", eval.samples),
      BBG_UINT("eval.seed", eval.seed),
      BBG_BOOL("eval.ema", eval.ema),
  };
  return table;
}

#undef BBG_UINT
#undef BBG_REAL
#undef BBG_BOOL
#undef BBG_ENUM
#undef BBG_TEXT

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return &f;
  return nullptr;
}

void check_data(const DataSpec& d) {
  require(d.kind == "shapes" || d.kind == "blobs" || d.kind == "idx",
          ErrorCode::kInvalidArgument,
          "data.kind: expected shapes|blobs|idx, got '" + d.kind + "'");
  require(d.holdout > 0.0 && d.holdout < 1.0, ErrorCode::kInvalidArgument,
          "data.holdout must be in (0, 1)");
  require(d.classes >= 0, ErrorCode::kInvalidArgument, "data.classes must be >= 0");
  require(d.noise_scale >= 0.0, ErrorCode::kInvalidArgument, "data.noise_scale must be >= 0");
}

struct Preset {
  const char* name;
  std::function<void(RunConfig&)> apply;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> table = {
      {"base", [](RunConfig&) {}},
      {"deterministic-e",
       [](RunConfig& c) { c.train.arch.encoder_mode = EncoderMode::kDeterministic; }},
      {"uniform-pz",
       [](RunConfig& c) {
         c.train.arch.encoder_mode = EncoderMode::kTanhDeterministic;
         c.train.arch.latent.kind = PriorKind::kUniform;
       }},
      {"x-unary-only", [](RunConfig& c) { c.train.flags.use_unary_z = false; }},
      {"z-unary-only", [](RunConfig& c) { c.train.flags.use_unary_x = false; }},
      {"no-unaries",
       [](RunConfig& c) {
         c.train.flags.use_unary_x = false;
         c.train.flags.use_unary_z = false;
       }},
      {"small-g-1/3", [](RunConfig& c) { c.train.arch.g_width /= 3; }},
      {"small-g-2/3", [](RunConfig& c) { c.train.arch.g_width = c.train.arch.g_width * 2 / 3; }},
      {"no-e-gan",
       [](RunConfig& c) {
         c.train.flags.use_encoder = false;
         c.train.flags.use_unary_z = false;
         c.train.flags.use_joint = false;
       }},
      {"high-res-e", [](RunConfig& c) { c.train.arch.e_resolution *= 2; }},
      {"low-res-g",
       [](RunConfig& c) {
         c.train.arch.e_resolution *= 2;
         c.train.arch.g_resolution /= 2;
       }},
      {"high-res-g",
       [](RunConfig& c) {
         c.train.arch.e_resolution *= 2;
         c.train.arch.g_resolution *= 2;
       }},
      {"wide-e-x2",
       [](RunConfig& c) {
         c.train.arch.e_resolution *= 2;
         c.train.arch.e_width *= 2;
       }},
      {"eta10",
       [](RunConfig& c) {
         c.train.arch.e_resolution *= 2;
         c.train.eta_E = 10.0;
       }},
  };
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key,
                      const std::string& value) {
  const Field* f = find_field(key);
  require(f != nullptr, ErrorCode::kInvalidArgument, "unknown config key '" + key + "'");
  f->set(config, value);
}

RunConfig parse_config(const std::string& text,
                       const std::string& preset_override) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(no) + ": ";
    require(eq != std::string::npos, ErrorCode::kInvalidArgument,
            where + "expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    require(find_field(key) != nullptr, ErrorCode::kInvalidArgument,
            where + "unknown key '" + key + "'");
    require(seen.insert(key).second, ErrorCode::kInvalidArgument,
            where + "duplicate key '" + key + "'");
    entries.emplace_back(std::move(key), std::move(value));
  }
  RunConfig config;
  for (const auto& [key, value] : entries)
    if (key == "preset" && preset_override.empty()) apply_preset(config, value);
  if (!preset_override.empty()) apply_preset(config, preset_override);
  for (const auto& [key, value] : entries) {
    if (key == "preset") continue;
    try {
      set_config_value(config, key, value);
    } catch (const Error& e) {
      fail(e.code(), std::string("config: ") + e.what());
    }
  }
  check_data(config.data);
  TrainConfig probe = config.train;
  probe.validate();
  return config;
}

RunConfig load_config(const std::string& path,
                      const std::string& preset_override) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open config '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), preset_override);
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.key;
    out += '=';
    out += f.get(config);
    out += '\n';
  }
  return out;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (const auto& p : presets()) names.emplace_back(p.name);
  return names;
}

bool is_preset(const std::string& name) {
  for (const auto& p : presets())
    if (name == p.name) return true;
  return false;
}

void apply_preset(RunConfig& config, const std::string& name) {
  const Preset* found = nullptr;
  for (const auto& p : presets())
    if (name == p.name) found = &p;
  require(found != nullptr, ErrorCode::kInvalidArgument,
          "unknown preset '" + name + "'");
  const RunConfig base;
  TrainConfig& t = config.train;
  t.flags.use_encoder = base.train.flags.use_encoder;
  t.flags.use_unary_x = base.train.flags.use_unary_x;
  t.flags.use_unary_z = base.train.flags.use_unary_z;
  t.flags.use_joint = base.train.flags.use_joint;
  t.arch.encoder_mode = base.train.arch.encoder_mode;
  t.arch.latent.kind = base.train.arch.latent.kind;
  t.arch.e_resolution = base.train.arch.e_resolution;
  t.arch.g_resolution = base.train.arch.g_resolution;
  t.arch.e_width = base.train.arch.e_width;
  t.arch.g_width = base.train.arch.g_width;
  t.eta_E = base.train.eta_E;
  found->apply(config);
  config.preset = name;
}

GridColumns grid_columns(const RunConfig& config) {
  const TrainConfig& t = config.train;
  GridColumns g;
  g.encoder = t.flags.use_encoder;
  g.stochastic = t.flags.use_encoder && t.arch.encoder_mode == EncoderMode::kStochastic;
  g.e_width = t.flags.use_encoder ? t.arch.e_width : 0;
  g.e_resolution = t.flags.use_encoder ? t.arch.e_resolution : 0;
  g.eta_E = t.flags.use_encoder ? t.eta_E : 0.0;
  g.g_width = t.arch.g_width;
  g.g_resolution = t.arch.g_resolution;
  g.joint = t.flags.use_joint;
  g.unary_x = t.flags.use_unary_x;
  g.unary_z = t.flags.use_unary_z;
  g.prior = t.arch.latent.kind;
  return g;
}

}  // namespace bbg
