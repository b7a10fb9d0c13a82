#pragma once

// Run configuration for the command-line driver: an INI file with
// [run], [dataset], [layer1] .. [layerN], [optimizer] and [output] sections,
// named presets, and `section.key=value` overrides.

#include "ccnn/ccnn_core.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <array>
#include <charconv>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace ccnn {

using ConfigTree = boost::property_tree::ptree;

struct DatasetSpec {
  std::string format = "idx";  // idx | amat | cifar10 | ccnf
  std::vector<std::filesystem::path> train;  // idx/ccnf: data file then labels; amat: one file; cifar10: batch files
  std::vector<std::filesystem::path> test;
  Index num_classes = 10;
  std::size_t train_limit = 0;  // 0: all samples
  std::size_t test_limit = 0;
  std::array<double, 3> split{1.0, 0.0, 0.0};  // fractions of the train source: train / validation / test
  std::uint64_t split_seed = 1;
  Index crop_h = 0;  // 0: no cropping
  Index crop_w = 0;
  CropMode crop_mode = CropMode::per_epoch;  // training crops; evaluation always uses the center
};

struct OutputSpec {
  std::filesystem::path dir = "ccnn-run";
  std::string model = "model.ccnn";
  std::string metrics = "metrics.csv";
  std::string summary = "summary.json";
  std::string cache_dir;  // relative to dir; empty disables the inter-stage feature cache
  bool f32_arrays = false;
};

struct RunConfig {
  DatasetSpec dataset;
  std::vector<LayerConfig> layers;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  OutputSpec output;
  std::string canonical;  // normalized INI text the config was built from
};

// ---------------------------------------------------------------------------
// Presets

inline const std::map<std::string, std::string>& presets() {
  static const std::map<std::string, std::string> table = {
      {"mnist-ccnn1", R"([dataset]
format = idx
split = 0.8, 0.2, 0
[layer1]
patch = 5
pool = 2
pool_stride = 2
kernel = gaussian
gamma = 0.2
features = random
m = 500
r = 16
zca_eps = 10
R = 10, 30, 100
[optimizer]
batch = 50
epochs = 20
eta0 = 1
projection = nuclear
)"},
      {"mnist-ccnn2", R"([dataset]
format = idx
split = 0.8, 0.2, 0
[layer1]
patch = 5
pool = 2
pool_stride = 2
kernel = gaussian
gamma = 0.2
features = random
m = 500
r = 16
zca_eps = 10
R = 10, 30, 100
[layer2]
patch = 5
pool = 2
pool_stride = 2
kernel = gaussian
gamma = 2
features = random
m = 1000
r = 32
R = 10, 30, 100
[optimizer]
batch = 50
epochs = 20
eta0 = 1
projection = nuclear
)"},
      {"cifar-ccnn", R"([dataset]
format = cifar10
split = 0.9, 0.1, 0
crop = 24x24
crop_mode = per_epoch
[layer1]
patch = 5
pad = 2
pool = 3
pool_stride = 2
kernel = gaussian
gamma = 1
features = random
m = 2000
r = 32
R = 30, 100, 300
[layer2]
patch = 5
pad = 2
pool = 3
pool_stride = 2
kernel = gaussian
gamma = 2
features = random
m = 2000
r = 32
R = 30, 100, 300
[layer3]
patch = 5
pad = 2
pool = 3
pool_stride = 2
kernel = gaussian
gamma = 2
features = random
m = 2000
r = 64
R = 30, 100, 300
[optimizer]
batch = 50
epochs = 10
eta0 = 0.5
projection = nuclear
)"},
  };
  return table;
}

// ---------------------------------------------------------------------------
// Parsing helpers

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string key_name(const std::string& section, const std::string& key) { return section + "." + key; }

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& v, const std::string& key) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline long long parse_nonneg(const std::string& v, const std::string& key) {
  const long long x = parse_int(v, key);
  if (x < 0) throw ConfigError(key + ": must be >= 0");
  return x;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

template <typename E>
E parse_enum(const std::string& v, const std::string& key, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw ConfigError(key + ": expected one of " + names + ", got '" + v + "'");
}

inline void check_keys(const ConfigTree& section, const std::string& name, const std::set<std::string>& allowed) {
  for (const auto& [key, value] : section) {
    if (!value.empty()) throw ConfigError("[" + name + "] has a nested key '" + key + "'");
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in [" + name + "]");
  }
}

inline const std::set<std::string> kOptimizerKeys = {"batch",      "epochs",       "eta0",    "decay",
                                                     "decay_steps", "projection",  "projection_stride",
                                                     "loss",       "early_stop",   "shuffle"};

inline void apply_optimizer_key(OptConfig& o, LossKind& loss, const std::string& key, const std::string& v,
                                const std::string& where) {
  const std::string k = key_name(where, key);
  if (key == "batch") o.batch_size = Index(parse_int(v, k));
  else if (key == "epochs") o.epochs = int(parse_int(v, k));
  else if (key == "eta0") o.eta0 = parse_double(v, k);
  else if (key == "decay")
    o.decay = parse_enum<StepDecay>(v, k, {{"inv_sqrt", StepDecay::inv_sqrt}, {"constant", StepDecay::constant}});
  else if (key == "decay_steps") o.decay_steps = parse_double(v, k);
  else if (key == "projection")
    o.projection = parse_enum<Projection>(
        v, k, {{"nuclear", Projection::nuclear}, {"frobenius", Projection::frobenius}, {"none", Projection::none}});
  else if (key == "projection_stride") o.projection_stride = int(parse_int(v, k));
  else if (key == "early_stop") o.early_stop = int(parse_int(v, k));
  else if (key == "shuffle") o.shuffle = parse_bool(v, k);
  else if (key == "loss")
    loss = parse_enum<LossKind>(v, k, {{"logistic", LossKind::multiclass_logistic}, {"squared", LossKind::squared}});
}

inline const std::set<std::string>& layer_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = {"patch", "stride",   "pad",   "pool",    "pool_stride", "kernel",     "gamma",
                               "features", "m",     "r",     "R",       "contrast",    "contrast_eps", "zca",        "zca_eps",
                               "scaling",  "fit_sample", "seed"};
    k.insert(kOptimizerKeys.begin(), kOptimizerKeys.end());
    return k;
  }();
  return keys;
}

inline LayerConfig parse_layer(const ConfigTree& sec, const std::string& name, const OptConfig& base_opt,
                               LossKind base_loss, std::uint64_t seed) {
  check_keys(sec, name, layer_keys());
  LayerConfig c;
  c.opt = base_opt;
  c.loss = base_loss;
  c.seed = seed;
  c.opt.seed = seed + 7;
  std::string kernel = "gaussian";
  double gamma = 1.0;
  bool gamma_set = false;
  for (const auto& [key, node] : sec) {
    const std::string v = trim(node.data());
    const std::string k = key_name(name, key);
    if (key == "patch") c.patch_side = Index(parse_int(v, k));
    else if (key == "stride") c.stride = Index(parse_int(v, k));
    else if (key == "pad") c.pad = Index(parse_nonneg(v, k));
    else if (key == "pool") c.pool_side = Index(parse_int(v, k));
    else if (key == "pool_stride") c.pool_stride = Index(parse_int(v, k));
    else if (key == "kernel") kernel = v;
    else if (key == "gamma") {
      gamma = parse_double(v, k);
      gamma_set = true;
    } else if (key == "features")
      c.approximation = parse_enum<FeatureVariant>(v, k,
                                                   {{"random", FeatureVariant::random_features},
                                                    {"nystrom", FeatureVariant::nystrom},
                                                    {"exact", FeatureVariant::exact},
                                                    {"identity", FeatureVariant::identity}});
    else if (key == "m") c.m = Index(parse_int(v, k));
    else if (key == "r") c.r = Index(parse_int(v, k));
    else if (key == "R") {
      c.radius_grid.clear();
      for (const auto& item : split_list(v)) c.radius_grid.push_back(parse_double(item, k));
      if (c.radius_grid.empty()) throw ConfigError(k + ": empty");
      c.opt.radius = c.radius_grid.front();
    } else if (key == "contrast")
      c.preprocess.contrast = parse_enum<Contrast>(v, k, {{"local", Contrast::local}, {"none", Contrast::none}});
    else if (key == "contrast_eps") c.preprocess.contrast_eps = parse_double(v, k);
    else if (key == "zca") c.preprocess.zca = parse_bool(v, k);
    else if (key == "zca_eps") c.preprocess.zca_eps = parse_double(v, k);
    else if (key == "scaling") {
      c.auto_scaling = v == "auto";
      if (!c.auto_scaling)
        c.preprocess.scaling = parse_enum<Scaling>(
            v, k, {{"unit_ball", Scaling::unit_ball}, {"unit_sphere", Scaling::unit_sphere}, {"none", Scaling::none}});
    } else if (key == "fit_sample") c.fit_sample = Index(parse_int(v, k));
    else if (key == "seed") {
      c.seed = std::uint64_t(parse_nonneg(v, k));
      c.opt.seed = c.seed + 7;
    } else apply_optimizer_key(c.opt, c.loss, key, v, name);
  }
  const std::string kk = key_name(name, "kernel");
  if (kernel == "gaussian") {
    if (!(gamma > 0)) throw ConfigError(key_name(name, "gamma") + ": must be > 0, got " + std::to_string(gamma));
    c.kernel = KernelSpec::gaussian(gamma);
  } else if (kernel == "inverse_poly") {
    c.kernel = KernelSpec::inverse_poly();
  } else if (kernel == "linear") {
    c.kernel = KernelSpec::linear();
  } else {
    throw ConfigError(kk + ": expected gaussian|inverse_poly|linear, got '" + kernel + "'");
  }
  if (gamma_set && kernel != "gaussian") throw ConfigError(key_name(name, "gamma") + ": only the gaussian kernel takes gamma");
  if (c.kernel.kind == KernelKind::linear && !sec.count("features")) c.approximation = FeatureVariant::identity;
  return c;
}

inline std::string write_ini(const ConfigTree& tree) {
  std::ostringstream os;
  boost::property_tree::write_ini(os, tree);
  return os.str();
}

}  // namespace detail

/// Parses INI text into a tree; relative dataset paths are resolved against `base`.
inline ConfigTree parse_config_text(const std::string& text, const std::filesystem::path& base = {}) {
  ConfigTree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  if (!base.empty()) {
    if (auto ds = tree.get_child_optional("dataset")) {
      for (const char* key : {"train", "test"}) {
        if (auto v = ds->get_optional<std::string>(key)) {
          std::string joined;
          for (const auto& p : detail::split_list(*v)) {
            const std::filesystem::path path(p);
            joined += (joined.empty() ? "" : ",") + (path.is_absolute() ? path : base / path).string();
          }
          ds->put(key, joined);
        }
      }
    }
  }
  return tree;
}

inline ConfigTree load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.parent_path());
}

inline ConfigTree preset_tree(const std::string& name) {
  const auto it = presets().find(name);
  if (it == presets().end()) {
    std::string names;
    for (const auto& [n, _] : presets()) names += (names.empty() ? "" : ", ") + n;
    throw ConfigError("unknown preset '" + name + "' (available: " + names + ")");
  }
  return parse_config_text(it->second);
}

/// Copies every key of `overlay` into `base`.
inline void merge_config(ConfigTree& base, const ConfigTree& overlay) {
  for (const auto& [section, keys] : overlay) {
    if (keys.empty()) throw ConfigError("top-level key '" + section + "' must live in a section");
    for (const auto& [key, value] : keys) base.put(section + "." + key, value.data());
  }
}

/// Applies one `section.key=value` override.
inline void apply_override(ConfigTree& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  const std::string path = detail::trim(assignment.substr(0, eq));
  const std::string value = detail::trim(assignment.substr(eq + 1));
  const auto dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size() || path.find('.', dot + 1) != std::string::npos)
    throw ConfigError("override key '" + path + "' must be section.key");
  tree.put(path, value);
}

/// Builds and validates a RunConfig; shape algebra is checked once the input
/// shape is known (see validate_against).
inline RunConfig build_run_config(const ConfigTree& tree) {
  using namespace detail;
  RunConfig rc;
  rc.canonical = write_ini(tree);

  static const std::set<std::string> sections = {"run", "dataset", "optimizer", "output"};
  std::size_t depth = 0;
  for (const auto& [name, sec] : tree) {
    if (sec.empty()) throw ConfigError("top-level key '" + name + "' must live in a section");
    if (sections.count(name)) continue;
    if (name.rfind("layer", 0) == 0) {
      const std::string idx = name.substr(5);
      if (idx.empty() || idx.find_first_not_of("0123456789") != std::string::npos || idx[0] == '0')
        throw ConfigError("layer section '" + name + "' must be named layer1, layer2, ...");
      depth = std::max<std::size_t>(depth, std::stoul(idx));
      continue;
    }
    throw ConfigError("unknown section [" + name + "]");
  }
  if (depth == 0) throw ConfigError("config defines no layers (need [layer1] .. [layerN])");
  for (std::size_t s = 1; s <= depth; ++s)
    if (!tree.get_child_optional("layer" + std::to_string(s)))
      throw ConfigError("layer sections must be contiguous: [layer" + std::to_string(s) + "] is missing");

  if (auto run = tree.get_child_optional("run")) {
    check_keys(*run, "run", {"seed", "threads"});
    if (auto v = run->get_optional<std::string>("seed")) rc.seed = std::uint64_t(parse_nonneg(trim(*v), "run.seed"));
    if (auto v = run->get_optional<std::string>("threads")) {
      const long long t = parse_int(trim(*v), "run.threads");
      if (t < 1) throw ConfigError("run.threads: must be >= 1");
      rc.threads = unsigned(t);
    }
  }

  if (auto ds = tree.get_child_optional("dataset")) {
    check_keys(*ds, "dataset",
               {"format", "train", "test", "num_classes", "train_limit", "test_limit", "split", "split_seed", "crop",
                "crop_mode"});
    DatasetSpec& d = rc.dataset;
    for (const auto& [key, node] : *ds) {
      const std::string v = trim(node.data());
      const std::string k = key_name("dataset", key);
      if (key == "format") {
        if (v != "idx" && v != "amat" && v != "cifar10" && v != "ccnf")
          throw ConfigError(k + ": expected idx|amat|cifar10|ccnf, got '" + v + "'");
        d.format = v;
      } else if (key == "train" || key == "test") {
        auto& list = key == "train" ? d.train : d.test;
        list.clear();
        for (const auto& p : split_list(v)) list.emplace_back(p);
      } else if (key == "num_classes") d.num_classes = Index(parse_int(v, k));
      else if (key == "train_limit") d.train_limit = std::size_t(parse_nonneg(v, k));
      else if (key == "test_limit") d.test_limit = std::size_t(parse_nonneg(v, k));
      else if (key == "split") {
        const auto parts = split_list(v);
        if (parts.empty() || parts.size() > 3) throw ConfigError(k + ": expected 1 to 3 fractions");
        d.split = {0.0, 0.0, 0.0};
        for (std::size_t i = 0; i < parts.size(); ++i) d.split[i] = parse_double(parts[i], k);
      } else if (key == "split_seed") d.split_seed = std::uint64_t(parse_nonneg(v, k));
      else if (key == "crop") {
        const auto x = v.find('x');
        if (x == std::string::npos) throw ConfigError(k + ": expected HxW, got '" + v + "'");
        d.crop_h = Index(parse_int(trim(v.substr(0, x)), k));
        d.crop_w = Index(parse_int(trim(v.substr(x + 1)), k));
        if (d.crop_h < 1 || d.crop_w < 1) throw ConfigError(k + ": crop sides must be >= 1");
      } else if (key == "crop_mode")
        d.crop_mode = parse_enum<CropMode>(
            v, k, {{"per_epoch", CropMode::per_epoch}, {"once", CropMode::once}, {"center", CropMode::center}});
    }
    if (d.num_classes < 1) throw ConfigError("dataset.num_classes: must be >= 1");
    double total = 0;
    for (double f : d.split) {
      if (f < 0) throw ConfigError("dataset.split: fractions must be >= 0");
      total += f;
    }
    if (total > 1.0 + 1e-12) throw ConfigError("dataset.split: fractions sum to more than 1");
    if (d.split[0] <= 0) throw ConfigError("dataset.split: the training fraction must be > 0");
  }

  OptConfig base_opt;
  LossKind base_loss = LossKind::multiclass_logistic;
  if (auto opt = tree.get_child_optional("optimizer")) {
    check_keys(*opt, "optimizer", kOptimizerKeys);
    for (const auto& [key, node] : *opt) apply_optimizer_key(base_opt, base_loss, key, trim(node.data()), "optimizer");
  }

  for (std::size_t s = 1; s <= depth; ++s) {
    const std::string name = "layer" + std::to_string(s);
    LayerConfig c = parse_layer(tree.get_child(name), name, base_opt, base_loss, rc.seed * 1000 + s);
    try {
      validate(c);
    } catch (const ConfigError& e) {
      throw ConfigError(name + ": " + e.what());
    }
    rc.layers.push_back(std::move(c));
  }

  if (auto out = tree.get_child_optional("output")) {
    check_keys(*out, "output", {"dir", "model", "metrics", "summary", "cache_dir", "f32_arrays"});
    OutputSpec& o = rc.output;
    if (auto v = out->get_optional<std::string>("dir")) o.dir = trim(*v);
    if (auto v = out->get_optional<std::string>("model")) o.model = trim(*v);
    if (auto v = out->get_optional<std::string>("metrics")) o.metrics = trim(*v);
    if (auto v = out->get_optional<std::string>("summary")) o.summary = trim(*v);
    if (auto v = out->get_optional<std::string>("cache_dir")) o.cache_dir = trim(*v);
    if (auto v = out->get_optional<std::string>("f32_arrays")) o.f32_arrays = parse_bool(trim(*v), "output.f32_arrays");
  }
  return rc;
}

/// Checks the layer stack against the (possibly cropped) input shape.
inline std::vector<StageGeometry> validate_against(const RunConfig& rc, const ImageShape& input) {
  return plan_stack(input, rc.layers, rc.dataset.num_classes);
}

/// The shape layer 1 sees: the raw image shape, cropped if cropping is configured.
inline ImageShape model_input_shape(const RunConfig& rc, const ImageShape& raw) {
  if (rc.dataset.crop_h == 0) return raw;
  return {raw.channels, rc.dataset.crop_h, rc.dataset.crop_w};
}

// ---------------------------------------------------------------------------
// Data loading

inline Dataset load_source(const std::string& format, const std::vector<std::filesystem::path>& files,
                           Index num_classes) {
  if (files.empty()) throw ConfigError("no data files given for format " + format);
  auto need = [&](std::size_t n) {
    if (files.size() != n)
      throw ConfigError("format " + format + " expects " + std::to_string(n) + " file(s), got " + std::to_string(files.size()));
  };
  Dataset d;
  if (format == "idx") {
    need(2);
    d = load_idx(files[0], files[1]);
  } else if (format == "amat") {
    need(1);
    d = load_amat(files[0]);
  } else if (format == "cifar10") {
    d = load_cifar10(files);
  } else if (format == "ccnf") {
    need(2);
    return load_feature_dataset(files[0], files[1], num_classes);
  } else {
    throw ConfigError("unknown dataset format '" + format + "'");
  }
  d.num_classes = num_classes;
  validate(d);
  return d;
}

struct RunData {
  Dataset train;       // cropped to the model's input shape (center or once) when cropping is on
  Dataset validation;  // center-cropped
  Dataset test;        // center-cropped
  DatasetSource augment;  // per-epoch training crops, when configured
};

inline Dataset center_crop(const Dataset& d, Index h, Index w) {
  if (d.empty() || h == 0) return d;
  return random_crop(d, h, w, 0, CropMode::center);
}

inline RunData load_run_data(const RunConfig& rc) {
  const DatasetSpec& s = rc.dataset;
  Dataset all = load_source(s.format, s.train, s.num_classes);
  if (s.train_limit > 0) all = all.head(s.train_limit);
  Splits parts = split(all, s.split, s.split_seed);
  RunData out;
  out.train = std::move(parts.train);
  out.validation = std::move(parts.val);
  out.test = std::move(parts.test);
  if (!s.test.empty()) {
    if (s.split[2] > 0) throw ConfigError("dataset.test files and a test split fraction are mutually exclusive");
    out.test = load_source(s.format, s.test, s.num_classes);
  }
  if (s.test_limit > 0) out.test = out.test.head(s.test_limit);
  if (out.train.empty()) throw DataError("training split is empty");
  if (s.crop_h > 0) {
    out.validation = center_crop(out.validation, s.crop_h, s.crop_w);
    out.test = center_crop(out.test, s.crop_h, s.crop_w);
    const std::uint64_t crop_seed = rc.seed + 17;
    if (s.crop_mode == CropMode::per_epoch) {
      auto base = std::make_shared<Dataset>(out.train);
      const Index h = s.crop_h, w = s.crop_w;
      out.augment = [base, h, w, crop_seed](int epoch) {
        return random_crop(*base, h, w, crop_seed, CropMode::per_epoch, epoch);
      };
      out.train = out.augment(0);
    } else {
      out.train = random_crop(out.train, s.crop_h, s.crop_w, crop_seed, s.crop_mode);
    }
  }
  return out;
}

}  // namespace ccnn
