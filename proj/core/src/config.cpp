#include "attrib/config.hpp"

#include <algorithm>
#include <set>

#include "attrib/error.hpp"
#include "json.hpp"

namespace attrib {

using Json = nlohmann::json;

const ExplainerSpec& RunConfig::explainer(Method method) const {
  for (const auto& e : explainers) {
    if (e.method == method) return e;
  }
  throw Error(ErrorCode::kConfig, "no explainer configured for " + std::string(method_name(method)));
}

std::optional<std::string> incompatibility(Method method, MetricKind metric) {
  if (method_domain(method) == MapDomain::kFeature) {
    return std::string(method_name(method)) +
           " yields feature-level maps, which are not comparable with pixel-level attributions";
  }
  if (metric == MetricKind::kPixelBias && method_sign(method) != SignInfo::kSigned) {
    return std::string(method_name(method)) +
           " yields an importance map without negative values; pixel_bias needs signed maps";
  }
  return std::nullopt;
}

namespace {

class Collector {
 public:
  void add(std::string code, std::string message) {
    issues.push_back({std::move(code), std::move(message)});
  }
  std::vector<ConfigIssue> issues;
};

template <class T>
std::optional<T> read(const Json& obj, const char* key, Collector& out, const std::string& where) {
  if (!obj.contains(key)) return std::nullopt;
  try {
    return obj.at(key).get<T>();
  } catch (const Json::exception&) {
    out.add("invalid_value", where + "." + key + " has the wrong type");
    return std::nullopt;
  }
}

template <class T>
void read_into(T& dst, const Json& obj, const char* key, Collector& out, const std::string& where) {
  if (auto v = read<T>(obj, key, out, where)) dst = *v;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

ExplainerSpec parse_explainer(const Json& j, std::size_t i, Collector& out, bool& ok) {
  const std::string where = "explainers[" + std::to_string(i) + "]";
  ExplainerSpec spec;
  ok = false;
  if (!j.is_object()) {
    out.add("invalid_value", where + " must be an object");
    return spec;
  }
  const auto name = read<std::string>(j, "method", out, where);
  if (!name) {
    out.add("missing_field", where + ".method is required");
    return spec;
  }
  const auto method = parse_method(*name);
  if (!method) {
    out.add("unknown_method", where + ": unknown method '" + *name + "'");
    return spec;
  }
  spec.method = *method;
  auto& c = spec.config;
  read_into(c.lrp_epsilon, j, "epsilon", out, where);
  read_into(c.lime.grid, j, "grid", out, where);
  read_into(c.lime.samples, j, "samples", out, where);
  read_into(c.lime.kernel_width, j, "kernel_width", out, where);
  read_into(c.lime.ridge_lambda, j, "ridge_lambda", out, where);
  read_into(c.pert.lambda_l1, j, "lambda_l1", out, where);
  read_into(c.pert.steps, j, "steps", out, where);
  read_into(c.pert.learning_rate, j, "learning_rate", out, where);
  read_into(c.shapley.permutations, j, "permutations", out, where);
  if (c.lrp_epsilon < 0.0) out.add("invalid_value", where + ".epsilon must be >= 0");
  if (c.shapley.permutations < 2) out.add("invalid_value", where + ".permutations must be >= 2");
  ok = true;
  return spec;
}

}  // namespace

ConfigValidation validate_config(std::string_view text, const std::filesystem::path& base_dir) {
  ConfigValidation result;
  Collector out;
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    result.issues.push_back({"parse_error", e.what()});
    return result;
  }
  if (!root.is_object()) {
    result.issues.push_back({"parse_error", "config must be a JSON object"});
    return result;
  }

  RunConfig cfg;

  // Models.
  if (!root.contains("models") || !root["models"].is_array() || root["models"].empty()) {
    out.add("missing_field", "models must be a nonempty array");
  } else {
    std::set<std::string> names;
    for (std::size_t i = 0; i < root["models"].size(); ++i) {
      const Json& j = root["models"][i];
      const std::string where = "models[" + std::to_string(i) + "]";
      if (!j.is_object()) {
        out.add("invalid_value", where + " must be an object");
        continue;
      }
      ModelSpec m;
      const auto manifest = read<std::string>(j, "manifest", out, where);
      const auto reference = read<std::string>(j, "reference", out, where);
      if (manifest.has_value() == reference.has_value()) {
        out.add("invalid_value", where + " needs exactly one of 'manifest' or 'reference'");
        continue;
      }
      if (manifest) m.manifest = resolve(base_dir, *manifest);
      if (reference) {
        const auto known = reference_model_names();
        if (std::find(known.begin(), known.end(), *reference) == known.end()) {
          out.add("unknown_model", where + ": unknown reference model '" + *reference + "'");
          continue;
        }
        m.reference = *reference;
        read_into(m.reference_seed, j, "seed", out, where);
      }
      m.name = read<std::string>(j, "name", out, where)
                   .value_or(reference ? *reference : std::filesystem::path(*manifest).stem().string());
      if (!names.insert(m.name).second) {
        out.add("invalid_value", where + ": duplicate model name '" + m.name + "'");
      }
      cfg.models.push_back(std::move(m));
    }
  }

  // Dataset.
  if (!root.contains("dataset") || !root["dataset"].is_object()) {
    out.add("missing_field", "dataset must be an object");
  } else {
    const Json& d = root["dataset"];
    const std::string fmt = read<std::string>(d, "format", out, "dataset").value_or("cifar");
    if (fmt == "cifar") {
      cfg.dataset.format = DatasetFormat::kCifar;
    } else if (fmt == "ppm_list") {
      cfg.dataset.format = DatasetFormat::kPpmList;
    } else {
      out.add("invalid_value", "dataset.format must be 'cifar' or 'ppm_list'");
    }
    if (d.contains("path") && d["path"].is_string()) {
      cfg.dataset.paths.push_back(resolve(base_dir, d["path"].get<std::string>()));
    } else if (d.contains("paths") && d["paths"].is_array()) {
      for (const auto& p : d["paths"]) {
        if (p.is_string()) cfg.dataset.paths.push_back(resolve(base_dir, p.get<std::string>()));
      }
    }
    if (cfg.dataset.paths.empty()) out.add("missing_field", "dataset.path (or paths) is required");
    if (cfg.dataset.format == DatasetFormat::kCifar && cfg.dataset.paths.size() > 1) {
      out.add("invalid_value", "cifar datasets take a single batch file");
    }
    read_into(cfg.dataset.n_images, d, "n_images", out, "dataset");
  }

  if (auto b = read<std::string>(root, "baseline", out, "config")) {
    if (*b == "per_channel") cfg.baseline_mode = BaselineMode::kPerChannel;
    else if (*b == "per_pixel") cfg.baseline_mode = BaselineMode::kPerPixel;
    else out.add("invalid_value", "baseline must be 'per_channel' or 'per_pixel'");
  }
  if (auto t = read<std::string>(root, "target", out, "config")) {
    if (*t == "predicted") cfg.target = TargetRule::kPredicted;
    else if (*t == "label") cfg.target = TargetRule::kLabel;
    else out.add("invalid_value", "target must be 'predicted' or 'label'");
  }
  read_into(cfg.master_seed, root, "master_seed", out, "config");
  read_into(cfg.workers, root, "workers", out, "config");
  if (cfg.workers == 0) out.add("invalid_value", "workers must be >= 1");
  if (auto o = read<std::string>(root, "output_dir", out, "config")) {
    cfg.output_dir = resolve(base_dir, *o);
  }

  // Explainers.
  if (!root.contains("explainers") || !root["explainers"].is_array() ||
      root["explainers"].empty()) {
    out.add("empty_methods", "explainers must list at least one method");
  } else {
    std::set<Method> seen;
    for (std::size_t i = 0; i < root["explainers"].size(); ++i) {
      bool ok = false;
      ExplainerSpec spec = parse_explainer(root["explainers"][i], i, out, ok);
      if (!ok) continue;
      if (!seen.insert(spec.method).second) {
        out.add("duplicate_method", "method '" + std::string(method_name(spec.method)) +
                                        "' listed twice");
        continue;
      }
      cfg.explainers.push_back(spec);
    }
  }

  // Metrics.
  if (!root.contains("metrics") || !root["metrics"].is_array() || root["metrics"].empty()) {
    out.add("missing_field", "metrics must be a nonempty array");
  } else {
    for (std::size_t i = 0; i < root["metrics"].size(); ++i) {
      const Json& j = root["metrics"][i];
      const std::string where = "metrics[" + std::to_string(i) + "]";
      if (!j.is_object()) {
        out.add("invalid_value", where + " must be an object");
        continue;
      }
      const auto name = read<std::string>(j, "metric", out, where);
      const auto kind = name ? parse_metric(*name) : std::nullopt;
      if (!kind) {
        out.add("unknown_metric", where + ": unknown or missing metric '" + name.value_or("") + "'");
        continue;
      }
      MetricSpec m;
      m.kind = *kind;
      if (j.contains("methods")) {
        for (const auto& mj : j["methods"]) {
          const auto method = mj.is_string() ? parse_method(mj.get<std::string>()) : std::nullopt;
          if (!method) {
            out.add("unknown_method", where + ": unknown method " + mj.dump());
            continue;
          }
          const bool configured =
              std::any_of(cfg.explainers.begin(), cfg.explainers.end(),
                          [&](const ExplainerSpec& e) { return e.method == *method; });
          if (!configured) {
            out.add("unconfigured_method", where + ": method '" + mj.get<std::string>() +
                                               "' is not in the explainers list");
            continue;
          }
          m.methods.push_back(*method);
        }
      } else {
        for (const auto& e : cfg.explainers) m.methods.push_back(e.method);
      }
      if (m.methods.empty()) out.add("empty_methods", where + " has no methods");
      for (Method method : m.methods) {
        if (auto why = incompatibility(method, m.kind)) {
          out.add("incompatible_method_metric",
                  where + " (" + std::string(metric_name(m.kind)) + "): " + *why);
        }
      }
      if (m.kind == MetricKind::kMutual && m.methods.size() < 2) {
        out.add("invalid_value", where + ": mutual needs at least two methods");
      }
      if (m.kind == MetricKind::kPixelBias) {
        m.fractions = read<std::vector<double>>(j, "fractions", out, where)
                          .value_or(std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9});
        for (double p : m.fractions) {
          if (!(p > 0.0 && p <= 1.0)) out.add("invalid_value", where + ": fractions must lie in (0, 1]");
        }
        const auto dirs = read<std::vector<std::string>>(j, "directions", out, where)
                              .value_or(std::vector<std::string>{"high", "low"});
        for (const auto& d : dirs) {
          if (d == "high") m.directions.push_back(Direction::kHigh);
          else if (d == "low") m.directions.push_back(Direction::kLow);
          else out.add("invalid_value", where + ": direction must be 'high' or 'low'");
        }
        read_into(m.permutations, j, "permutations", out, where);
        if (m.permutations < 2) out.add("invalid_value", where + ": permutations must be >= 2");
        if (auto n = read<std::string>(j, "norm", out, where)) {
          if (*n == "l1") m.norm = BiasNorm::kL1;
          else if (*n == "l2") m.norm = BiasNorm::kL2;
          else out.add("invalid_value", where + ": norm must be 'l1' or 'l2'");
        }
      }
      if (m.kind == MetricKind::kUnexplainable) {
        m.taus = read<std::vector<double>>(j, "taus", out, where)
                     .value_or(std::vector<double>{0.05, 0.1});
        for (double t : m.taus) {
          if (!(t >= 0.0 && t <= 1.0)) out.add("invalid_value", where + ": taus must lie in [0, 1]");
        }
        if (auto l = read<std::string>(j, "layer", out, where)) {
          try {
            m.layer = LayerRef::parse(*l);
          } catch (const Error& e) {
            out.add("invalid_value", where + ": " + e.what());
          }
        }
      }
      cfg.metrics.push_back(std::move(m));
    }
  }

  result.issues = std::move(out.issues);
  if (result.issues.empty()) result.config = std::move(cfg);
  return result;
}

}  // namespace attrib
