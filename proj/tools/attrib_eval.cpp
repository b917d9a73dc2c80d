#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <unistd.h>

#include "CLI11.hpp"
#include "attrib/config.hpp"
#include "attrib/error.hpp"
#include "attrib/explainers.hpp"
#include "attrib/harness.hpp"
#include "attrib/model_io.hpp"
#include "attrib/shapley.hpp"

namespace fs = std::filesystem;
using namespace attrib;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool use_color() {
  const char* no_color = std::getenv("NO_COLOR");
  if (no_color != nullptr && *no_color != '\0') return false;
  return isatty(fileno(stderr)) != 0;
}

void log(const char* level, const char* ansi, const std::string& message) {
  if (use_color()) {
    std::cerr << ansi << level << "\033[0m: " << message << "\n";
  } else {
    std::cerr << level << ": " << message << "\n";
  }
}

void log_error(const std::string& m) { log("error", "\033[31m", m); }
void log_warn(const std::string& m) { log("warning", "\033[33m", m); }
void log_info(const std::string& m) { log("info", "\033[36m", m); }

// Model and image selection shared by explain and shapley.
struct InputOptions {
  std::string manifest;
  std::string reference;
  std::uint64_t model_seed = 0;
  std::string image;
  std::string cifar;
  std::size_t index = 0;
  std::string baseline_dataset;
  std::optional<std::size_t> target;

  void attach(CLI::App& cmd) {
    auto* m = cmd.add_option("--model", manifest, "Model manifest (.json)");
    auto* r = cmd.add_option("--reference", reference, "Built-in reference model name");
    m->excludes(r);
    cmd.add_option("--model-seed", model_seed, "Weight seed for --reference");
    auto* i = cmd.add_option("--image", image, "Input image (binary PPM)");
    auto* c = cmd.add_option("--cifar", cifar, "CIFAR-10 batch file");
    i->excludes(c);
    cmd.add_option("--index", index, "Record index within --cifar");
    cmd.add_option("--baseline-dataset", baseline_dataset,
                   "CIFAR batch whose per-channel mean is the baseline "
                   "(default: the input image's own mean)");
    cmd.add_option("--target", target, "Class to explain (default: predicted class)");
  }

  ModelGraph model() const {
    if (manifest.empty() == reference.empty()) {
      throw UsageError("exactly one of --model or --reference is required");
    }
    if (!reference.empty()) return build_reference_model(reference, model_seed);
    return load_model_files(manifest);
  }

  Tensor input() const {
    if (image.empty() == cifar.empty()) {
      throw UsageError("exactly one of --image or --cifar is required");
    }
    if (!image.empty()) return load_ppm(image);
    ImageSet set = load_cifar_batch(cifar);
    if (index >= set.size()) {
      throw UsageError("--index " + std::to_string(index) + " out of range (batch has " +
                       std::to_string(set.size()) + " images)");
    }
    return set.images[index];
  }

  Baseline baseline(const Tensor& img) const {
    if (!baseline_dataset.empty()) return compute_baseline(load_cifar_batch(baseline_dataset));
    ImageSet own;
    own.image_shape = img.shape();
    own.images.push_back(img);
    return compute_baseline(own);
  }

  std::size_t resolve_target(const ModelGraph& model, const Tensor& img) const {
    if (!target) return forward(model, img).argmax();
    if (*target >= model.num_classes()) {
      throw UsageError("--target " + std::to_string(*target) + " out of range (model has " +
                       std::to_string(model.num_classes()) + " classes)");
    }
    return *target;
  }
};

int cmd_run(const std::string& config_path, std::optional<std::size_t> workers,
            std::optional<std::uint64_t> seed, const std::string& out_dir) {
  std::string text;
  try {
    const auto bytes = read_file(config_path);
    text.assign(bytes.begin(), bytes.end());
  } catch (const Error& e) {
    log_error(e.what());
    return kExitUsage;
  }
  ConfigValidation parsed = validate_config(text, fs::path(config_path).parent_path());
  if (!parsed.ok()) {
    for (const auto& issue : parsed.issues) log_error("[" + issue.code + "] " + issue.message);
    return kExitUsage;
  }
  RunConfig config = *parsed.config;
  if (workers) {
    if (*workers == 0) {
      log_error("[invalid_value] --workers must be >= 1");
      return kExitUsage;
    }
    config.workers = *workers;
  }
  if (seed) config.master_seed = *seed;
  if (!out_dir.empty()) config.output_dir = out_dir;

  const RunSummary summary = run_evaluation(config);
  for (const auto& e : summary.errors) {
    std::string where = e.model + " image " + e.image_id;
    if (!e.method.empty()) where += " " + e.method;
    if (!e.metric.empty()) where += " " + e.metric;
    log_warn(where + ": [" + e.code + "] " + e.message);
  }
  log_info(std::to_string(summary.rows) + " rows over " + std::to_string(summary.cells) +
           " cells written to " + config.output_dir.string());
  if (summary.over_budget) {
    log_error("more than 10% of images failed; see errors.csv");
    return kExitRuntime;
  }
  return kExitOk;
}

int cmd_validate(const std::string& config_path) {
  const auto bytes = read_file(config_path);
  const ConfigValidation parsed =
      validate_config(std::string(bytes.begin(), bytes.end()), fs::path(config_path).parent_path());
  if (!parsed.ok()) {
    for (const auto& issue : parsed.issues) log_error("[" + issue.code + "] " + issue.message);
    return kExitUsage;
  }
  std::cout << "ok\n";
  return kExitOk;
}

int cmd_explain(const InputOptions& in, const std::string& method_name_arg, std::uint64_t seed,
                const std::string& out_prefix) {
  const auto method = parse_method(method_name_arg);
  if (!method) throw UsageError("unknown method '" + method_name_arg + "'");
  const ModelGraph model = in.model();
  const Tensor img = in.input();
  const Baseline baseline = in.baseline(img);
  const std::size_t target = in.resolve_target(model, img);
  ExplainerConfig cfg;
  cfg.lime.seed = seed;
  cfg.pert.seed = seed;
  cfg.shapley.seed = seed;
  const AttributionMap map = explain(*method, model, img, baseline, target, cfg);
  for (const auto& path : write_map(map, out_prefix)) std::cout << path.string() << "\n";
  return kExitOk;
}

int cmd_shapley(const InputOptions& in, bool exact, std::optional<std::size_t> samples,
                std::uint64_t seed, std::size_t workers, const std::string& out_path) {
  if (exact == samples.has_value()) throw UsageError("give exactly one of --exact or --samples");
  const ModelGraph model = in.model();
  const Tensor img = in.input();
  const Baseline baseline = in.baseline(img);
  const std::size_t target = in.resolve_target(model, img);
  const ModelValueFunction v(model, img, baseline, target);
  ShapleyEstimate est;
  if (exact) {
    if (v.players() > kMaxExactPlayers) {
      throw UsageError("--exact supports at most " + std::to_string(kMaxExactPlayers) +
                       " pixels; this image has " + std::to_string(v.players()));
    }
    est = exact_shapley(v, workers);
  } else {
    if (*samples < 2) throw UsageError("--samples must be >= 2");
    SamplingOptions opts;
    opts.permutations = *samples;
    opts.seed = seed;
    opts.workers = workers;
    est = sampled_shapley(v, opts);
  }
  std::ostringstream csv;
  csv << "row,col,value,variance\n";
  const std::size_t cols = model.width();
  for (std::size_t p = 0; p < est.values.size(); ++p) {
    csv << p / cols << "," << p % cols << "," << format_double(est.values[p]) << ","
        << format_double(est.per_player_variance.empty() ? 0.0 : est.per_player_variance[p])
        << "\n";
  }
  if (out_path.empty() || out_path == "-") {
    std::cout << csv.str();
  } else {
    write_text(out_path, csv.str());
  }
  return kExitOk;
}

int cmd_export(const std::string& name, std::uint64_t seed, const std::string& prefix) {
  save_model_files(build_reference_model(name, seed), prefix);
  std::cout << prefix << ".json\n" << prefix << ".bin\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribution-method evaluation toolkit"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Evaluate a config grid and write reports");
  std::string config_path;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed_override;
  std::string out_dir;
  run->add_option("--config", config_path, "Run configuration (JSON)")->required();
  run->add_option("--workers", workers, "Worker threads (overrides config)");
  run->add_option("--seed", seed_override, "Master seed (overrides config)");
  run->add_option("--out", out_dir, "Output directory (overrides config)");

  auto* validate = app.add_subcommand("validate", "Check a config and report every issue");
  validate->add_option("--config", config_path, "Run configuration (JSON)")->required();

  InputOptions explain_in;
  std::string method;
  std::uint64_t seed = 0;
  std::string out_prefix;
  auto* explain_cmd = app.add_subcommand("explain", "Write one attribution map as CSV and PGM");
  explain_in.attach(*explain_cmd);
  explain_cmd->add_option("--method", method, "Explainer name")->required();
  explain_cmd->add_option("--seed", seed, "Seed for stochastic explainers");
  explain_cmd->add_option("--out", out_prefix, "Output prefix")->required();

  InputOptions shapley_in;
  bool exact = false;
  std::optional<std::size_t> samples;
  std::size_t shapley_workers = 1;
  std::string shapley_out;
  auto* shapley = app.add_subcommand("shapley", "Exact or sampled Shapley values per pixel");
  shapley_in.attach(*shapley);
  shapley->add_flag("--exact", exact, "Enumerate every coalition");
  shapley->add_option("--samples", samples, "Number of sampled permutations");
  shapley->add_option("--seed", seed, "Sampling seed");
  shapley->add_option("--workers", shapley_workers, "Worker threads");
  shapley->add_option("--out", shapley_out, "Output CSV (default: stdout)");

  std::string export_name;
  std::string export_prefix;
  auto* export_cmd = app.add_subcommand("export-model", "Write a reference model manifest");
  export_cmd->add_option("--reference", export_name, "Reference model name")->required();
  export_cmd->add_option("--seed", seed, "Weight seed");
  export_cmd->add_option("--out", export_prefix, "Output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    log_error(e.what());
    return kExitUsage;
  }

  try {
    if (*run) return cmd_run(config_path, workers, seed_override, out_dir);
    if (*validate) return cmd_validate(config_path);
    if (*explain_cmd) return cmd_explain(explain_in, method, seed, out_prefix);
    if (*shapley) {
      return cmd_shapley(shapley_in, exact, samples, seed, shapley_workers, shapley_out);
    }
    if (*export_cmd) return cmd_export(export_name, seed, export_prefix);
  } catch (const UsageError& e) {
    log_error(e.what());
    return kExitUsage;
  } catch (const Error& e) {
    log_error(std::string("[") + std::string(error_code_name(e.code())) + "] " + e.what());
    return e.code() == ErrorCode::kConfig ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    log_error(e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
