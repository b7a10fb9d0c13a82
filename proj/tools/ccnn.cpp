// ccnn: train, evaluate, inspect and export features of convexified CNNs.

#include "ccnn/ccnn_core.hpp"
#include "ccnn/run_config.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;
constexpr int kSummarySchema = 1;

bool g_verbose = false;

void info(const std::string& msg) {
  if (g_verbose) std::cerr << "[ccnn] " << msg << "\n";
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

json shape_json(const ccnn::ImageShape& s) { return json::array({s.channels, s.height, s.width}); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ccnn::DataError("cannot write " + path.string());
  out << text;
  if (!out) throw ccnn::DataError("write failed for " + path.string());
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json eval_json(const ccnn::EvalResult& r) {
  json j;
  j["n"] = r.n;
  j["error"] = r.n ? json(r.error) : json(nullptr);
  json conf = json::array();
  for (ccnn::Index i = 0; i < r.confusion.rows(); ++i) {
    json row = json::array();
    for (ccnn::Index k = 0; k < r.confusion.cols(); ++k) row.push_back(r.confusion(i, k));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  return j;
}

void print_confusion(const ccnn::EvalResult& r) {
  std::cout << "confusion (rows: true label, cols: predicted)\n";
  for (ccnn::Index i = 0; i < r.confusion.rows(); ++i) {
    std::cout << std::setw(4) << i << ":";
    for (ccnn::Index k = 0; k < r.confusion.cols(); ++k) std::cout << ' ' << std::setw(5) << r.confusion(i, k);
    std::cout << '\n';
  }
}

/// Center-crops a dataset whose images are larger than the model input.
ccnn::Dataset fit_to_model(const ccnn::Dataset& d, const ccnn::CcnnModel& model) {
  if (d.empty()) return d;
  const ccnn::ImageShape want = model.input_shape();
  const ccnn::ImageShape have = d.shape();
  if (have == want) return d;
  if (have.channels == want.channels && have.height >= want.height && have.width >= want.width) {
    info("center-cropping " + ccnn::to_string(have) + " inputs to " + ccnn::to_string(want));
    return ccnn::center_crop(d, want.height, want.width);
  }
  throw ccnn::ShapeError("dataset images are " + ccnn::to_string(have) + " but the model expects " +
                         ccnn::to_string(want));
}

ccnn::Dataset load_eval_data(const std::string& format, const std::vector<std::string>& files, ccnn::Index num_classes,
                             std::size_t limit) {
  std::vector<fs::path> paths(files.begin(), files.end());
  ccnn::Dataset d = ccnn::load_source(format, paths, num_classes);
  if (limit > 0) d = d.head(limit);
  return d;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out_dir;
  unsigned threads = 0;
};

int cmd_train(const TrainArgs& a) {
  const auto t_start = std::chrono::steady_clock::now();
  ccnn::ConfigTree tree;
  if (!a.preset.empty()) tree = ccnn::preset_tree(a.preset);
  if (!a.config.empty()) ccnn::merge_config(tree, ccnn::load_config_file(a.config));
  if (a.preset.empty() && a.config.empty()) throw ccnn::ConfigError("train needs --config and/or --preset");
  for (const auto& o : a.overrides) ccnn::apply_override(tree, o);
  if (!a.out_dir.empty()) tree.put("output.dir", a.out_dir);
  if (a.threads > 0) tree.put("run.threads", std::to_string(a.threads));

  const ccnn::RunConfig rc = ccnn::build_run_config(tree);
  ccnn::set_num_threads(rc.threads);
  const std::string config_hash = hex32(ccnn::io::crc32_of(reinterpret_cast<const std::uint8_t*>(rc.canonical.data()),
                                                           rc.canonical.size()));

  ccnn::RunData data = ccnn::load_run_data(rc);
  const auto geometry = ccnn::validate_against(rc, data.train.shape());
  info("train " + std::to_string(data.train.size()) + ", validation " + std::to_string(data.validation.size()) +
       ", test " + std::to_string(data.test.size()) + " samples of shape " + ccnn::to_string(data.train.shape()));

  fs::create_directories(rc.output.dir);
  ccnn::MultiLayerOptions opts;
  if (!rc.output.cache_dir.empty()) opts.cache_dir = rc.output.dir / rc.output.cache_dir;
  opts.augment = data.augment;
  if (!data.validation.empty()) opts.validation = &data.validation;
  opts.on_stage = [](std::size_t s, const ccnn::StageResult& r) {
    const auto& last = r.records.back();
    info("layer " + std::to_string(s + 1) + " trained: R = " + fmt(r.A.radius) + ", objective " + fmt(last.objective) +
         ", train error " + fmt(last.train_error) + ", effective rank " + fmt(last.effective_rank));
  };
  const ccnn::MultiLayerResult result = ccnn::train_multi_layer(data.train, rc.layers, opts);
  ccnn::CcnnModel model = result.model;

  json meta;
  meta["seed"] = rc.seed;
  meta["config_hash"] = config_hash;
  meta["config"] = rc.canonical;
  json layer_meta = json::array();
  for (std::size_t s = 0; s < rc.layers.size(); ++s)
    layer_meta.push_back({{"seed", rc.layers[s].seed}, {"optimizer_seed", rc.layers[s].opt.seed}});
  meta["layers"] = layer_meta;
  model.metadata = meta.dump();

  const fs::path model_path = rc.output.dir / rc.output.model;
  ccnn::SaveOptions save;
  if (rc.output.f32_arrays) save.feature_dtype = ccnn::io::DType::f32;
  ccnn::save_model(model, model_path, save);

  // Metrics: one row per (stage, epoch).
  std::ostringstream csv;
  csv << "stage,radius,epoch,objective,train_error,nuclear_norm,effective_rank,wall_ms\n";
  for (std::size_t s = 0; s < result.records.size(); ++s) {
    double radius = rc.layers[s].opt.radius;
    for (const auto& t : result.radius_trials[s])
      if (t.chosen) radius = t.radius;
    for (const auto& r : result.records[s])
      csv << s + 1 << ',' << fmt(radius) << ',' << r.epoch << ',' << fmt(r.objective) << ',' << fmt(r.train_error) << ','
          << fmt(r.nuclear_norm) << ',' << fmt(r.effective_rank) << ',' << fmt(r.wall_ms) << '\n';
  }
  const fs::path metrics_path = rc.output.dir / rc.output.metrics;
  write_text(metrics_path, csv.str());

  const auto train_eval = ccnn::evaluate(model, data.train);
  const auto val_eval = ccnn::evaluate(model, data.validation);
  const auto test_eval = ccnn::evaluate(model, data.test);

  json summary;
  summary["schema_version"] = kSummarySchema;
  summary["command"] = "train";
  summary["config_hash"] = config_hash;
  summary["seed"] = rc.seed;
  summary["depth"] = rc.layers.size();
  json layers = json::array();
  for (std::size_t s = 0; s < rc.layers.size(); ++s) {
    const auto& l = model.layers[s];
    json trials = json::array();
    double radius = rc.layers[s].opt.radius;
    for (const auto& t : result.radius_trials[s]) {
      trials.push_back({{"R", t.radius}, {"validation_error", t.validation_error}, {"chosen", t.chosen}});
      if (t.chosen) radius = t.radius;
    }
    const auto& last = result.records[s].back();
    layers.push_back({{"input", shape_json(l.input_shape())},
                      {"output", shape_json(l.output_shape())},
                      {"patches", geometry[s].patches.P},
                      {"pooled_patches", geometry[s].pool.P_prime},
                      {"patch_dim", geometry[s].patches.d1},
                      {"kernel", ccnn::to_string(l.features.kernel.kind)},
                      {"features", ccnn::to_string(l.features.variant)},
                      {"m", l.m()},
                      {"r", l.r()},
                      {"R", radius},
                      {"radius_trials", trials},
                      {"rank_tie", result.filters[s].tie},
                      {"final_objective", last.objective},
                      {"final_train_error", last.train_error},
                      {"nuclear_norm", last.nuclear_norm},
                      {"effective_rank", last.effective_rank}});
  }
  summary["layers"] = layers;
  summary["train"] = eval_json(train_eval);
  summary["validation"] = eval_json(val_eval);
  summary["test"] = eval_json(test_eval);
  summary["train_error"] = train_eval.n ? json(train_eval.error) : json(nullptr);
  summary["validation_error"] = val_eval.n ? json(val_eval.error) : json(nullptr);
  summary["test_error"] = test_eval.n ? json(test_eval.error) : json(nullptr);
  summary["model"] = model_path.string();
  summary["metrics"] = metrics_path.string();
  summary["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  const fs::path summary_path = rc.output.dir / rc.output.summary;
  write_text(summary_path, summary.dump(2) + "\n");

  std::cout << "model:      " << model_path.string() << "\n"
            << "metrics:    " << metrics_path.string() << "\n"
            << "summary:    " << summary_path.string() << "\n"
            << "train error " << fmt(train_eval.error) << " on " << train_eval.n << " samples\n";
  if (val_eval.n) std::cout << "val error   " << fmt(val_eval.error) << " on " << val_eval.n << " samples\n";
  if (test_eval.n) std::cout << "test error  " << fmt(test_eval.error) << " on " << test_eval.n << " samples\n";
  return kExitOk;
}

struct DataArgs {
  std::string format = "idx";
  std::vector<std::string> files;
  ccnn::Index num_classes = 10;
  std::size_t limit = 0;
};

int cmd_eval(const std::string& model_path, const DataArgs& d, const std::string& json_out) {
  const ccnn::CcnnModel model = ccnn::load_model(model_path);
  const ccnn::Dataset data = fit_to_model(load_eval_data(d.format, d.files, d.num_classes, d.limit), model);
  const ccnn::EvalResult r = ccnn::evaluate(model, data);
  std::cout << "error " << fmt(r.error) << " on " << r.n << " samples\n";
  print_confusion(r);
  json j = eval_json(r);
  j["schema_version"] = kSummarySchema;
  j["command"] = "eval";
  j["model"] = model_path;
  if (!json_out.empty()) write_text(json_out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_inspect(const std::string& model_path, const std::string& json_out) {
  const ccnn::CcnnModel model = ccnn::load_model(model_path);
  json j;
  j["schema_version"] = kSummarySchema;
  j["command"] = "inspect";
  j["model"] = model_path;
  j["d2"] = model.d2;
  std::cout << "model " << model_path << ": " << model.layers.size() << " layer(s), " << model.d2 << " labels\n";
  json layers = json::array();
  for (std::size_t s = 0; s < model.layers.size(); ++s) {
    const auto& l = model.layers[s];
    std::cout << "layer " << s + 1 << ": " << ccnn::to_string(l.input_shape()) << " -> " << ccnn::to_string(l.output_shape())
              << "  patch " << l.plan.patch_side << " stride " << l.plan.stride << " pad " << l.plan.pad << " (P = "
              << l.plan.P << ", d1 = " << l.plan.d1 << ")  pool " << l.pool.pool_side << "/" << l.pool.pool_stride
              << " (P' = " << l.pool.P_prime << ")  " << ccnn::to_string(l.features.kernel.kind) << " kernel, "
              << ccnn::to_string(l.features.variant) << " features, m = " << l.m() << ", r = " << l.r() << "\n";
    layers.push_back({{"input", shape_json(l.input_shape())},
                      {"output", shape_json(l.output_shape())},
                      {"patch", l.plan.patch_side},
                      {"stride", l.plan.stride},
                      {"pad", l.plan.pad},
                      {"pool", l.pool.pool_side},
                      {"pool_stride", l.pool.pool_stride},
                      {"patches", l.plan.P},
                      {"pooled_patches", l.pool.P_prime},
                      {"patch_dim", l.plan.d1},
                      {"kernel", ccnn::to_string(l.features.kernel.kind)},
                      {"gamma", l.features.kernel.gamma},
                      {"features", ccnn::to_string(l.features.variant)},
                      {"m", l.m()},
                      {"r", l.r()}});
  }
  j["layers"] = layers;

  const ccnn::Matrix& A = model.top.A;
  const ccnn::Vector sv = ccnn::singular_values(A);
  const double nuclear = sv.sum();
  const double spectral = sv.size() ? sv(0) : 0.0;
  const double frobenius = A.norm();
  const double eff = spectral > 0 ? nuclear / spectral : 0.0;
  std::cout << "predictor A: " << A.rows() << " x " << A.cols() << " (R = " << fmt(model.top.radius) << ")\n"
            << "  nuclear norm   " << fmt(nuclear) << "\n"
            << "  spectral norm  " << fmt(spectral) << "\n"
            << "  Frobenius norm " << fmt(frobenius) << "\n"
            << "  effective rank " << fmt(eff) << "\n"
            << "  singular values:";
  json spectrum = json::array();
  for (ccnn::Index i = 0; i < sv.size(); ++i) {
    std::cout << (i % 6 == 0 ? "\n   " : "") << ' ' << fmt(sv(i));
    spectrum.push_back(sv(i));
  }
  std::cout << "\n";
  j["predictor"] = {{"rows", A.rows()},       {"cols", A.cols()},         {"R", model.top.radius},
                    {"nuclear_norm", nuclear}, {"spectral_norm", spectral}, {"frobenius_norm", frobenius},
                    {"effective_rank", eff},   {"singular_values", spectrum}};
  if (!json_out.empty()) write_text(json_out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_features(const std::string& model_path, const DataArgs& d, const std::string& out, const std::string& labels_out) {
  const ccnn::CcnnModel model = ccnn::load_model(model_path);
  const ccnn::Dataset data = fit_to_model(load_eval_data(d.format, d.files, d.num_classes, d.limit), model);
  std::vector<ccnn::Image> features(data.size());
  ccnn::parallel_for(data.size(), [&](std::size_t i) { features[i] = model.conv_output(data.images[i]); });
  ccnn::write_features(out, features);
  if (!labels_out.empty()) ccnn::write_idx_labels(data.labels, labels_out);
  const ccnn::ImageShape s = features.empty() ? model.layers.back().output_shape() : features.front().shape;
  std::cout << "wrote " << features.size() << " feature maps of shape " << ccnn::to_string(s) << " to " << out << "\n";
  return kExitOk;
}

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ccnn::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ccnn::DomainError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ccnn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ccnn::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ccnn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convexified convolutional neural networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ccnn 1.0.0");
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log progress to stderr");
  int code = kExitOk;

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a CCNN (depth = number of [layerN] blocks)");
  t->add_option("-c,--config", train.config, "INI config file")->check(CLI::ExistingFile);
  t->add_option("-p,--preset", train.preset, "Named hyperparameter preset (mnist-ccnn1, mnist-ccnn2, cifar-ccnn)");
  t->add_option("-s,--set", train.overrides, "Override as section.key=value (repeatable)")->take_all();
  t->add_option("-o,--out", train.out_dir, "Output directory (overrides output.dir)");
  t->add_option("-j,--threads", train.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  t->callback([&] { code = guarded([&] { return cmd_train(train); }); });

  std::string model_path, json_out, out_path, labels_out;
  DataArgs data;
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("-f,--format", data.format, "Dataset format: idx, amat, cifar10 or ccnf")
        ->check(CLI::IsMember({"idx", "amat", "cifar10", "ccnf"}));
    sub->add_option("-d,--data", data.files, "Data files (idx/ccnf: images labels; amat: file; cifar10: batches)")
        ->required()
        ->delimiter(',');
    sub->add_option("--num-classes", data.num_classes, "Label count")->check(CLI::PositiveNumber);
    sub->add_option("--limit", data.limit, "Use at most this many samples (0: all)");
  };

  auto* e = app.add_subcommand("eval", "Classification error and confusion counts of a model on a dataset");
  e->add_option("-m,--model", model_path, "Model file")->required();
  add_data(e);
  e->add_option("--json", json_out, "Write the result as JSON");
  e->callback([&] { code = guarded([&] { return cmd_eval(model_path, data, json_out); }); });

  auto* i = app.add_subcommand("inspect", "Layer shapes and the predictor's spectrum");
  i->add_option("-m,--model", model_path, "Model file")->required();
  i->add_option("--json", json_out, "Write the report as JSON");
  i->callback([&] { code = guarded([&] { return cmd_inspect(model_path, json_out); }); });

  auto* f = app.add_subcommand("features", "Export the top convolutional layer's outputs as a CCNF file");
  f->add_option("-m,--model", model_path, "Model file")->required();
  add_data(f);
  f->add_option("--out", out_path, "Output CCNF file")->required();
  f->add_option("--labels-out", labels_out, "Also write the labels as an IDX label file");
  f->callback([&] { code = guarded([&] { return cmd_features(model_path, data, out_path, labels_out); }); });

  app.parse_complete_callback([&] {
    g_verbose = verbose;
    if (verbose) ccnn::log_sink() = [](const std::string& m) { std::cerr << "[ccnn] " << m << "\n"; };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }
  return code;
}
