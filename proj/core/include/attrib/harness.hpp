#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attrib/config.hpp"
#include "attrib/explainers.hpp"
#include "attrib/model.hpp"
#include "attrib/model_io.hpp"

namespace attrib {

ModelGraph load_model_spec(const ModelSpec& spec);

// Loads the dataset without applying the n_images cap.
ImageSet load_dataset(const DatasetSpec& spec);

// Stable per-image identifiers used in reports.
std::vector<std::string> image_ids(const DatasetSpec& spec, std::size_t count);

// Seed for one explainer evaluation; depends only on names, never on
// scheduling.
std::uint64_t explainer_seed(std::uint64_t master, const std::string& model, Method method,
                             const std::string& image_id);
// Seed of the Shapley reference shared by the pixel_bias cells of one image.
std::uint64_t reference_seed(std::uint64_t master, const std::string& model,
                             const std::string& image_id);

// One failed evaluation. Empty method and metric mean the whole image failed;
// an empty metric alone means the method's map could not be computed.
struct ImageError {
  std::string model;
  std::string image_id;
  std::string method;
  std::string metric;
  std::string code;
  std::string message;
};

struct RunSummary {
  std::size_t rows = 0;
  std::size_t cells = 0;
  std::vector<ImageError> errors;
  // Set when, for some model, more than 10% of the images had any failure.
  // Failed cells are left out of results.csv and of the aggregates.
  bool over_budget = false;
  std::vector<std::filesystem::path> files;
};

// Writes results.csv, summary.json, errors.csv and curve_<model>_<metric>.csv
// into config.output_dir. Output bytes depend only on the config.
RunSummary run_evaluation(const RunConfig& config);

// Shortest round-trip decimal text.
std::string format_double(double value);

// Row-major "row,col,value" CSV with a header line.
std::string map_to_csv(const AttributionMap& map);

// 16-bit binary PGM. Signed maps are centred at mid-grey and scaled by
// max |a|; nonnegative maps span black to white.
std::vector<std::uint8_t> map_to_pgm(const AttributionMap& map);

// Writes <prefix>.csv and <prefix>.pgm and returns their paths.
std::vector<std::filesystem::path> write_map(const AttributionMap& map,
                                             const std::filesystem::path& prefix);

}  // namespace attrib
