#include "attrib/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "attrib/error.hpp"
#include "attrib/metrics.hpp"
#include "attrib/parallel.hpp"
#include "attrib/rng.hpp"
#include "attrib/shapley.hpp"
#include "json.hpp"

namespace attrib {

std::string format_double(double value) {
  if (value == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

ModelGraph load_model_spec(const ModelSpec& spec) {
  if (spec.reference) return build_reference_model(*spec.reference, spec.reference_seed);
  return load_model_files(*spec.manifest);
}

ImageSet load_dataset(const DatasetSpec& spec) {
  if (spec.format == DatasetFormat::kCifar) return load_cifar_batch(spec.paths.at(0));
  ImageSet set;
  for (const auto& path : spec.paths) {
    Tensor img = load_ppm(path);
    if (set.images.empty()) {
      set.image_shape = img.shape();
    } else if (img.shape() != set.image_shape) {
      throw Error(ErrorCode::kShapeMismatch, path.string() + ": image shape " +
                                                 shape_to_string(img.shape()) + " differs from " +
                                                 shape_to_string(set.image_shape));
    }
    set.images.push_back(std::move(img));
  }
  set.source_id = "ppm_list";
  return set;
}

std::vector<std::string> image_ids(const DatasetSpec& spec, std::size_t count) {
  std::vector<std::string> ids;
  ids.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ids.push_back(spec.format == DatasetFormat::kPpmList ? spec.paths[i].filename().string()
                                                         : std::to_string(i));
  }
  return ids;
}

std::uint64_t explainer_seed(std::uint64_t master, const std::string& model, Method method,
                             const std::string& image_id) {
  return mix_seed(master, fnv1a64(model + "/" + std::string(method_name(method)) + "/" + image_id));
}

std::uint64_t reference_seed(std::uint64_t master, const std::string& model,
                             const std::string& image_id) {
  return mix_seed(master, fnv1a64(model + "/reference/" + image_id));
}

namespace {

bool is_stochastic(Method m) {
  return m == Method::kLime || m == Method::kPert || m == Method::kSampledShapley;
}

// One output cell: a (method or method pair, metric, parameter) combination.
struct Cell {
  std::size_t metric_index = 0;
  MetricKind kind = MetricKind::kPixelBias;
  Method method = Method::kGrad;
  std::optional<Method> partner;
  std::string param_name;
  double param = 0.0;
  std::optional<Direction> direction;

  std::string method_label() const {
    std::string s(method_name(method));
    if (partner) s += "|" + std::string(method_name(*partner));
    return s;
  }
};

std::vector<Cell> build_cells(const RunConfig& config) {
  std::vector<Cell> cells;
  for (std::size_t mi = 0; mi < config.metrics.size(); ++mi) {
    const MetricSpec& spec = config.metrics[mi];
    Cell base;
    base.metric_index = mi;
    base.kind = spec.kind;
    switch (spec.kind) {
      case MetricKind::kPixelBias:
        for (Method m : spec.methods) {
          for (double p : spec.fractions) {
            for (Direction d : spec.directions) {
              Cell c = base;
              c.method = m;
              c.param_name = "fraction";
              c.param = p;
              c.direction = d;
              cells.push_back(c);
            }
          }
        }
        break;
      case MetricKind::kUnexplainable:
        for (Method m : spec.methods) {
          for (double tau : spec.taus) {
            Cell c = base;
            c.method = m;
            c.param_name = "tau";
            c.param = tau;
            cells.push_back(c);
          }
        }
        break;
      case MetricKind::kNonRobust:
        for (Method m : spec.methods) {
          Cell c = base;
          c.method = m;
          cells.push_back(c);
        }
        break;
      case MetricKind::kMutual:
        for (std::size_t i = 0; i < spec.methods.size(); ++i) {
          for (std::size_t j = i + 1; j < spec.methods.size(); ++j) {
            Cell c = base;
            c.method = spec.methods[i];
            c.partner = spec.methods[j];
            cells.push_back(c);
          }
        }
        break;
    }
  }
  return cells;
}

struct ImageResult {
  // Empty entries are cells that failed for this image.
  std::vector<std::optional<double>> values;
  std::vector<std::uint64_t> seeds;
  std::vector<ImageError> errors;
  // Set when the image could not be evaluated at all.
  bool failed = false;
};

struct ModelContext {
  const RunConfig* config = nullptr;
  const ModelSpec* spec = nullptr;
  const ModelGraph* model = nullptr;
  const Baseline* baseline = nullptr;
  const std::vector<Cell>* cells = nullptr;
  // alpha per metric index; only set for unexplainable metrics.
  std::vector<double> alpha;
};

ExplainerConfig seeded_config(const ModelContext& ctx, Method method, std::uint64_t seed) {
  ExplainerConfig cfg = ctx.config->explainer(method).config;
  cfg.lime.seed = seed;
  cfg.pert.seed = seed;
  cfg.shapley.seed = seed;
  cfg.shapley.workers = 1;
  return cfg;
}

ImageError make_error(const std::string& model, const std::string& image_id,
                      const std::string& method, const std::string& metric,
                      const std::exception& e) {
  const auto* err = dynamic_cast<const Error*>(&e);
  return ImageError{model, image_id, method, metric,
                    err ? std::string(error_code_name(err->code())) : "internal", e.what()};
}

ImageResult evaluate_image(const ModelContext& ctx, const Tensor& image,
                           std::optional<std::size_t> label, const std::string& image_id) {
  const ModelGraph& model = *ctx.model;
  const Baseline& baseline = *ctx.baseline;
  const std::string& model_name = ctx.spec->name;
  const std::vector<Cell>& cells = *ctx.cells;
  ImageResult out;
  out.values.resize(cells.size());
  out.seeds.assign(cells.size(), 0);

  std::size_t target = 0;
  try {
    if (image.shape() != model.input_shape()) {
      throw Error(ErrorCode::kShapeMismatch, "image shape " + shape_to_string(image.shape()) +
                                                 " does not match model input " +
                                                 shape_to_string(model.input_shape()));
    }
    image.require_finite("image");
    if (ctx.config->target == TargetRule::kLabel) {
      if (!label) throw Error(ErrorCode::kInvalidArgument, "image has no label");
      target = *label;
      if (target >= model.num_classes()) {
        throw Error(ErrorCode::kOutOfRange, "label " + std::to_string(target) +
                                                " outside model classes");
      }
    } else {
      target = forward(model, image).argmax();
    }
  } catch (const std::exception& e) {
    out.failed = true;
    out.errors.push_back(make_error(model_name, image_id, "", "", e));
    return out;
  }

  // Maps are computed once per method; a failed map is remembered so every
  // cell that needs it reports the same error.
  std::map<Method, std::variant<AttributionMap, ImageError>> maps;
  auto map_for = [&](Method m) -> const AttributionMap& {
    auto it = maps.find(m);
    if (it == maps.end()) {
      const std::uint64_t seed = explainer_seed(ctx.config->master_seed, model_name, m, image_id);
      try {
        it = maps.emplace(m, explain(m, model, image, baseline, target,
                                     seeded_config(ctx, m, seed)))
                 .first;
      } catch (const std::exception& e) {
        it = maps.emplace(m, make_error(model_name, image_id, std::string(method_name(m)), "", e))
                 .first;
      }
    }
    if (const auto* err = std::get_if<ImageError>(&it->second)) throw *err;
    return std::get<AttributionMap>(it->second);
  };

  std::map<std::size_t, ShapleyEstimate> references;
  const std::uint64_t ref_seed = reference_seed(ctx.config->master_seed, model_name, image_id);
  auto reference_for = [&](std::size_t permutations) -> const ShapleyEstimate& {
    auto it = references.find(permutations);
    if (it == references.end()) {
      ModelValueFunction v(model, image, baseline, target);
      SamplingOptions opts;
      opts.permutations = permutations;
      opts.seed = ref_seed;
      it = references.emplace(permutations, sampled_shapley(v, opts)).first;
    }
    return it->second;
  };

  std::set<std::pair<std::string, std::string>> reported;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const Cell& cell = cells[c];
    const MetricSpec& spec = ctx.config->metrics[cell.metric_index];
    const std::string metric(metric_name(cell.kind));
    const std::uint64_t method_seed =
        is_stochastic(cell.method)
            ? explainer_seed(ctx.config->master_seed, model_name, cell.method, image_id)
            : 0;
    try {
      double value = 0.0;
      std::uint64_t seed = method_seed;
      switch (cell.kind) {
        case MetricKind::kPixelBias:
          value = metric_pixel_bias(map_for(cell.method), reference_for(spec.permutations),
                                    cell.param, *cell.direction, spec.norm)
                      .value;
          seed = ref_seed;
          break;
        case MetricKind::kUnexplainable:
          value = metric_unexplainable(map_for(cell.method), model, image, baseline, cell.param,
                                       ctx.alpha[cell.metric_index], spec.layer);
          break;
        case MetricKind::kNonRobust: {
          const Explainer explainer = bind_explainer(cell.method, model, baseline,
                                                     seeded_config(ctx, cell.method, method_seed));
          value = metric_non_robustness(explainer, map_for(cell.method), model, image, baseline,
                                        target);
          break;
        }
        case MetricKind::kMutual:
          value = metric_mutual(map_for(cell.method), map_for(*cell.partner));
          seed = 0;
          break;
      }
      if (!std::isfinite(value)) {
        throw Error(ErrorCode::kNonFinite, metric + " for " + cell.method_label() +
                                               " is not finite");
      }
      out.values[c] = value;
      out.seeds[c] = seed;
    } catch (const ImageError& e) {
      // The map itself failed.
      if (reported.insert({e.method, ""}).second) out.errors.push_back(e);
    } catch (const std::exception& e) {
      if (reported.insert({cell.method_label(), metric}).second) {
        out.errors.push_back(make_error(model_name, image_id, cell.method_label(), metric, e));
      }
    }
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::string file_token(const std::string& s) {
  std::string t;
  for (char c : s) {
    const bool safe = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                      c == '-' || c == '_' || c == '.';
    t += safe ? c : '_';
  }
  return t;
}

struct CellAggregate {
  double mean = 0.0;
  std::size_t n = 0;
};

}  // namespace

RunSummary run_evaluation(const RunConfig& config) {
  const ImageSet dataset = load_dataset(config.dataset);
  if (dataset.size() == 0) throw Error(ErrorCode::kInvalidArgument, "dataset is empty");
  if (config.target == TargetRule::kLabel && dataset.labels.empty()) {
    throw Error(ErrorCode::kConfig, "target 'label' needs a labeled dataset");
  }
  const std::size_t n_images = config.dataset.n_images == 0
                                   ? dataset.size()
                                   : std::min(config.dataset.n_images, dataset.size());
  const std::vector<Tensor> images(dataset.images.begin(),
                                   dataset.images.begin() + static_cast<std::ptrdiff_t>(n_images));
  const Baseline baseline = compute_baseline(dataset, config.baseline_mode);
  const std::vector<std::string> ids = image_ids(config.dataset, n_images);
  const std::vector<Cell> cells = build_cells(config);

  std::filesystem::create_directories(config.output_dir);
  RunSummary summary;
  summary.cells = cells.size();

  std::ostringstream results;
  results << "model,method,metric,param_name,param_value,direction,image_id,value,seed\n";
  nlohmann::ordered_json json_cells = nlohmann::ordered_json::array();
  nlohmann::ordered_json json_models = nlohmann::ordered_json::array();
  std::map<std::pair<std::string, MetricKind>, std::vector<std::pair<const Cell*, CellAggregate>>>
      curves;

  for (const ModelSpec& spec : config.models) {
    const ModelGraph model = load_model_spec(spec);
    ModelContext ctx;
    ctx.config = &config;
    ctx.spec = &spec;
    ctx.model = &model;
    ctx.baseline = &baseline;
    ctx.cells = &cells;
    ctx.alpha.assign(config.metrics.size(), 0.0);
    for (std::size_t mi = 0; mi < config.metrics.size(); ++mi) {
      if (config.metrics[mi].kind == MetricKind::kUnexplainable) {
        ctx.alpha[mi] = feature_normalizer(model, images, config.metrics[mi].layer);
      }
    }

    std::vector<ImageResult> per_image(n_images);
    parallel_for(n_images, config.workers, [&](std::size_t i) {
      std::optional<std::size_t> label;
      if (!dataset.labels.empty()) label = dataset.labels[i];
      per_image[i] = evaluate_image(ctx, images[i], label, ids[i]);
    });

    std::size_t failed = 0;
    for (const ImageResult& r : per_image) {
      summary.errors.insert(summary.errors.end(), r.errors.begin(), r.errors.end());
      if (!r.errors.empty()) ++failed;
    }
    const bool over = failed * 10 > n_images;
    summary.over_budget = summary.over_budget || over;
    json_models.push_back({{"name", spec.name},
                           {"images", n_images},
                           {"failed_images", failed},
                           {"over_budget", over}});

    for (std::size_t c = 0; c < cells.size(); ++c) {
      const Cell& cell = cells[c];
      std::vector<double> values;
      const std::string prefix =
          csv_field(spec.name) + "," + cell.method_label() + "," +
          std::string(metric_name(cell.kind)) + "," + cell.param_name + "," +
          (cell.param_name.empty() ? std::string() : format_double(cell.param)) + "," +
          (cell.direction ? std::string(direction_name(*cell.direction)) : std::string()) + ",";
      for (std::size_t i = 0; i < n_images; ++i) {
        const ImageResult& r = per_image[i];
        if (!r.values[c]) continue;
        values.push_back(*r.values[c]);
        results << prefix << csv_field(ids[i]) << "," << format_double(*r.values[c]) << ","
                << r.seeds[c] << "\n";
        ++summary.rows;
      }
      CellAggregate agg;
      agg.n = values.size();
      // Plain left-to-right mean so external scripts can recompute it.
      double sum = 0.0;
      for (double v : values) sum += v;
      agg.mean = values.empty() ? 0.0 : sum / static_cast<double>(values.size());
      nlohmann::ordered_json jc = {{"model", spec.name},
                                   {"method", cell.method_label()},
                                   {"metric", metric_name(cell.kind)}};
      if (!cell.param_name.empty()) {
        jc["param_name"] = cell.param_name;
        jc["param_value"] = cell.param;
      }
      if (cell.direction) jc["direction"] = direction_name(*cell.direction);
      jc["mean"] = values.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(agg.mean);
      jc["n_images"] = agg.n;
      json_cells.push_back(std::move(jc));
      if (cell.kind == MetricKind::kPixelBias || cell.kind == MetricKind::kUnexplainable) {
        curves[{spec.name, cell.kind}].push_back({&cell, agg});
      }
    }
  }

  auto record = [&](const std::filesystem::path& name, const std::string& text) {
    const auto path = config.output_dir / name;
    write_text(path, text);
    summary.files.push_back(path);
  };
  record("results.csv", results.str());

  std::ostringstream errors;
  errors << "model,image_id,method,metric,code,message\n";
  for (const ImageError& e : summary.errors) {
    errors << csv_field(e.model) << "," << csv_field(e.image_id) << "," << e.method << ","
           << e.metric << "," << e.code << "," << csv_field(e.message) << "\n";
  }
  record("errors.csv", errors.str());

  for (const auto& [key, entries] : curves) {
    std::ostringstream curve;
    if (key.second == MetricKind::kPixelBias) {
      // One line per (method, fraction) with the high and low series side by side.
      curve << "method,fraction,high,low\n";
      std::map<std::pair<std::string, double>, std::pair<std::string, std::string>> rows;
      std::vector<std::pair<std::string, double>> order;
      for (const auto& [cell, agg] : entries) {
        const std::pair<std::string, double> k{cell->method_label(), cell->param};
        if (!rows.count(k)) order.push_back(k);
        auto& slot = rows[k];
        const std::string v = agg.n == 0 ? std::string() : format_double(agg.mean);
        (*cell->direction == Direction::kHigh ? slot.first : slot.second) = v;
      }
      for (const auto& k : order) {
        curve << k.first << "," << format_double(k.second) << "," << rows[k].first << ","
              << rows[k].second << "\n";
      }
    } else {
      curve << "method,tau,value\n";
      for (const auto& [cell, agg] : entries) {
        curve << cell->method_label() << "," << format_double(cell->param) << ","
              << (agg.n == 0 ? std::string() : format_double(agg.mean)) << "\n";
      }
    }
    record("curve_" + file_token(key.first) + "_" + std::string(metric_name(key.second)) + ".csv",
           curve.str());
  }

  nlohmann::ordered_json doc = {{"master_seed", config.master_seed},
                                {"n_images", n_images},
                                {"dataset", dataset.source_id},
                                {"models", json_models},
                                {"cells", json_cells},
                                {"failed_images", summary.errors.size()},
                                {"over_budget", summary.over_budget}};
  record("summary.json", doc.dump(2) + "\n");
  return summary;
}

std::string map_to_csv(const AttributionMap& map) {
  std::ostringstream out;
  out << "row,col,value\n";
  for (std::size_t r = 0; r < map.rows(); ++r) {
    for (std::size_t c = 0; c < map.cols(); ++c) {
      out << r << "," << c << "," << format_double(map.values[r * map.cols() + c]) << "\n";
    }
  }
  return out.str();
}

std::vector<std::uint8_t> map_to_pgm(const AttributionMap& map) {
  const std::string header =
      "P5\n" + std::to_string(map.cols()) + " " + std::to_string(map.rows()) + "\n65535\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  double scale = 0.0;
  double lo = 0.0;
  if (map.sign == SignInfo::kSigned) {
    for (double v : map.values.data()) scale = std::max(scale, std::abs(v));
  } else {
    lo = *std::min_element(map.values.data().begin(), map.values.data().end());
    const double hi = *std::max_element(map.values.data().begin(), map.values.data().end());
    scale = hi - lo;
  }
  for (double v : map.values.data()) {
    double t = 0.0;
    if (scale > 0.0) {
      t = map.sign == SignInfo::kSigned ? 0.5 + 0.5 * v / scale : (v - lo) / scale;
    } else if (map.sign == SignInfo::kSigned) {
      t = 0.5;
    }
    const auto level = static_cast<std::uint16_t>(std::lround(std::clamp(t, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<std::uint8_t>(level >> 8));
    out.push_back(static_cast<std::uint8_t>(level & 0xff));
  }
  return out;
}

std::vector<std::filesystem::path> write_map(const AttributionMap& map,
                                             const std::filesystem::path& prefix) {
  std::filesystem::path csv = prefix;
  csv += ".csv";
  std::filesystem::path pgm = prefix;
  pgm += ".pgm";
  write_text(csv, map_to_csv(map));
  write_file(pgm, map_to_pgm(map));
  return {csv, pgm};
}

}  // namespace attrib
