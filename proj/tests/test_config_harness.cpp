#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "attrib/config.hpp"
#include "attrib/harness.hpp"
#include "attrib/model_io.hpp"
#include "json.hpp"
#include "support/fixtures.hpp"

namespace attrib {
namespace {

using Json = nlohmann::json;
using testing::read_text;
using testing::TempDir;

Json base_config() {
  return Json::parse(R"({
    "models": [{"reference": "MiniCNN-32", "seed": 42}],
    "dataset": {"format": "cifar", "path": "batch.bin", "n_images": 3},
    "explainers": [{"method": "grad"}, {"method": "gi"}, {"method": "lrp"}, {"method": "gb"}],
    "metrics": [
      {"metric": "pixel_bias", "methods": ["gi", "lrp"], "permutations": 4},
      {"metric": "unexplainable"},
      {"metric": "non_robust", "methods": ["grad", "gi"]},
      {"metric": "mutual"}
    ],
    "master_seed": 5
  })");
}

std::vector<std::string> codes(const Json& cfg) {
  const ConfigValidation v = validate_config(cfg.dump());
  std::vector<std::string> out;
  for (const auto& issue : v.issues) out.push_back(issue.code);
  return out;
}

bool has_code(const Json& cfg, const std::string& code) {
  const auto c = codes(cfg);
  return std::find(c.begin(), c.end(), code) != c.end();
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  return out;
}

TEST(Config, BaseConfigIsValid) {
  const ConfigValidation v = validate_config(base_config().dump(), "/data");
  ASSERT_TRUE(v.ok()) << (v.issues.empty() ? "" : v.issues[0].message);
  const RunConfig& c = *v.config;
  EXPECT_EQ(c.models[0].name, "MiniCNN-32");
  EXPECT_EQ(c.dataset.paths[0], std::filesystem::path("/data/batch.bin"));
  EXPECT_EQ(c.metrics[0].fractions, (std::vector<double>{0.1, 0.3, 0.5, 0.7, 0.9}));
  EXPECT_EQ(c.metrics[0].directions.size(), 2u);
  EXPECT_EQ(c.metrics[1].taus, (std::vector<double>{0.05, 0.1}));
  EXPECT_EQ(c.metrics[3].methods.size(), 4u);  // defaults to every explainer
  EXPECT_EQ(c.target, TargetRule::kPredicted);
  EXPECT_EQ(c.workers, 1u);
}

TEST(Config, PertWithPixelBiasRejected) {
  Json cfg = base_config();
  cfg["explainers"].push_back({{"method", "pert"}});
  cfg["metrics"][0]["methods"] = {"gi", "pert"};
  EXPECT_TRUE(has_code(cfg, "incompatible_method_metric"));
}

TEST(Config, CamWithMutualRejected) {
  Json cfg = base_config();
  cfg["explainers"].push_back({{"method", "cam"}});
  cfg["metrics"][3]["methods"] = {"gi", "cam"};
  EXPECT_TRUE(has_code(cfg, "incompatible_method_metric"));
  // The default method list also pulls CAM in.
  cfg["metrics"][3].erase("methods");
  EXPECT_TRUE(has_code(cfg, "incompatible_method_metric"));
}

TEST(Config, EmptyMethodListsRejected) {
  Json cfg = base_config();
  cfg["explainers"] = Json::array();
  EXPECT_TRUE(has_code(cfg, "empty_methods"));
  Json cfg2 = base_config();
  cfg2["metrics"][0]["methods"] = Json::array();
  EXPECT_TRUE(has_code(cfg2, "empty_methods"));
}

TEST(Config, EveryIssueIsCollected) {
  Json cfg = base_config();
  cfg["models"][0]["reference"] = "ResNet-32";
  cfg["explainers"].push_back({{"method", "deepshap"}});
  cfg["explainers"].push_back({{"method", "grad"}});
  cfg["metrics"].push_back({{"metric", "faithfulness"}});
  cfg["metrics"][2]["methods"] = {"grad", "lime"};
  cfg["metrics"][0]["fractions"] = {0.0};
  cfg.erase("dataset");
  const auto c = codes(cfg);
  for (const char* code : {"unknown_model", "unknown_method", "duplicate_method", "unknown_metric",
                           "unconfigured_method", "invalid_value", "missing_field"})
    EXPECT_NE(std::find(c.begin(), c.end(), code), c.end()) << code;
}

TEST(Config, ParseErrorAndMutualArity) {
  EXPECT_EQ(codes(Json::parse("[1]")), std::vector<std::string>{"parse_error"});
  const ConfigValidation v = validate_config("{not json");
  ASSERT_EQ(v.issues.size(), 1u);
  EXPECT_EQ(v.issues[0].code, "parse_error");
  Json cfg = base_config();
  cfg["metrics"][3]["methods"] = {"gi"};
  EXPECT_TRUE(has_code(cfg, "invalid_value"));
}

TEST(Config, Incompatibility) {
  EXPECT_FALSE(incompatibility(Method::kGradientInput, MetricKind::kPixelBias).has_value());
  EXPECT_TRUE(incompatibility(Method::kGrad, MetricKind::kPixelBias).has_value());
  EXPECT_FALSE(incompatibility(Method::kGrad, MetricKind::kMutual).has_value());
  EXPECT_TRUE(incompatibility(Method::kGradCam, MetricKind::kUnexplainable).has_value());
  EXPECT_FALSE(incompatibility(Method::kPert, MetricKind::kNonRobust).has_value());
}

TEST(Harness, SeedsDependOnNamesOnly) {
  EXPECT_EQ(explainer_seed(1, "m", Method::kLime, "3"), explainer_seed(1, "m", Method::kLime, "3"));
  EXPECT_NE(explainer_seed(1, "m", Method::kLime, "3"), explainer_seed(1, "m", Method::kLime, "4"));
  EXPECT_NE(explainer_seed(1, "m", Method::kLime, "3"), explainer_seed(2, "m", Method::kLime, "3"));
  EXPECT_NE(reference_seed(1, "m", "3"), reference_seed(1, "n", "3"));
}

TEST(Harness, FormatDouble) {
  EXPECT_EQ(format_double(0.0), "0");
  EXPECT_EQ(format_double(-0.0), "0");
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0 / 3.0), "0.3333333333333333");
  EXPECT_EQ(std::stod(format_double(2.0 / 7.0)), 2.0 / 7.0);
}

TEST(Harness, MapExports) {
  const AttributionMap map = make_map(Method::kGradientInput, 0, Tensor::from({1, 2}, {-1.0, 0.5}));
  EXPECT_EQ(map_to_csv(map), "row,col,value\n0,0,-1\n0,1,0.5\n");
  const auto pgm = map_to_pgm(map);
  const std::string header = "P5\n2 1\n65535\n";
  ASSERT_EQ(pgm.size(), header.size() + 4);
  EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())), header);
  // -1 maps to black, +0.5 to three quarters of full scale.
  EXPECT_EQ(pgm[header.size()], 0);
  EXPECT_EQ(pgm[header.size() + 1], 0);
  const unsigned second = pgm[header.size() + 2] * 256u + pgm[header.size() + 3];
  EXPECT_NEAR(second, 0.75 * 65535, 1.0);
}

class HarnessRun : public ::testing::Test {
 protected:
  void SetUp() override { testing::write_synthetic_cifar(dir / "batch.bin", 4, 21); }

  RunConfig config(std::size_t workers, const std::string& out, Json cfg = base_config()) {
    cfg["workers"] = workers;
    cfg["output_dir"] = out;
    ConfigValidation v = validate_config(cfg.dump(), dir.path());
    EXPECT_TRUE(v.ok());
    return *v.config;
  }

  TempDir dir{"harness"};
};

TEST_F(HarnessRun, ByteIdenticalAcrossWorkerCounts) {
  const RunSummary one = run_evaluation(config(1, "w1"));
  const RunSummary eight = run_evaluation(config(8, "w8"));
  EXPECT_TRUE(one.errors.empty());
  EXPECT_EQ(one.rows, eight.rows);
  for (const char* name : {"results.csv", "summary.json", "errors.csv",
                           "curve_MiniCNN-32_pixel_bias.csv", "curve_MiniCNN-32_unexplainable.csv"}) {
    const std::string a = read_text(dir / "w1" / name);
    ASSERT_FALSE(a.empty()) << name;
    EXPECT_EQ(a, read_text(dir / "w8" / name)) << name;
  }
}

TEST_F(HarnessRun, RowCountsAndAggregates) {
  const RunSummary s = run_evaluation(config(2, "out"));
  const auto rows = lines(read_text(dir / "out" / "results.csv"));
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows[0], "model,method,metric,param_name,param_value,direction,image_id,value,seed");
  EXPECT_EQ(rows.size() - 1, s.rows);

  const Json summary = Json::parse(read_text(dir / "out" / "summary.json"));
  std::map<std::string, std::set<std::string>> cells;  // "metric/method" -> param keys
  std::map<std::string, double> means;
  for (const auto& cell : summary["cells"]) {
    const std::string key = cell["metric"].get<std::string>() + "/" + cell["method"].get<std::string>();
    const std::string value =
        cell.contains("param_value") ? format_double(cell["param_value"].get<double>()) : "";
    const std::string param = cell.value("param_name", "") + "=" + value + "/" +
                              cell.value("direction", "");
    cells[key].insert(param);
    means[key + "/" + param] = cell["mean"].get<double>();
    EXPECT_EQ(cell["n_images"].get<std::size_t>(), 3u);
  }
  // 5 fractions x 2 directions per (model, method).
  EXPECT_EQ(cells["pixel_bias/gi"].size(), 10u);
  EXPECT_EQ(cells["pixel_bias/lrp"].size(), 10u);
  EXPECT_EQ(cells["unexplainable/gb"].size(), 2u);
  std::size_t mutual_pairs = 0;
  for (const auto& [key, params] : cells)
    if (key.rfind("mutual/", 0) == 0) mutual_pairs += params.size();
  EXPECT_EQ(mutual_pairs, 4u * 3u / 2u);
  EXPECT_EQ(s.cells, summary["cells"].size());

  // Every JSON mean is the plain mean of its CSV rows.
  std::map<std::string, std::vector<double>> per_cell;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = split(rows[i]);
    ASSERT_EQ(f.size(), 9u) << rows[i];
    const std::string key = f[2] + "/" + f[1] + "/" + f[3] + "=" + f[4] + "/" + f[5];
    per_cell[key].push_back(std::stod(f[7]));
    EXPECT_GE(std::stod(f[7]), 0.0);
  }
  ASSERT_EQ(per_cell.size(), means.size());
  for (const auto& [key, values] : per_cell) {
    ASSERT_EQ(values.size(), 3u) << key;
    double sum = 0.0;
    for (double v : values) sum += v;
    ASSERT_TRUE(means.count(key)) << key;
    EXPECT_EQ(means[key], sum / 3.0) << key;
  }
}

TEST_F(HarnessRun, CurveFilesFollowFractionsAndTaus) {
  run_evaluation(config(1, "curves"));
  const auto bias = lines(read_text(dir / "curves" / "curve_MiniCNN-32_pixel_bias.csv"));
  EXPECT_EQ(bias[0], "method,fraction,high,low");
  EXPECT_EQ(bias.size(), 1u + 2u * 5u);
  const auto unexpl = lines(read_text(dir / "curves" / "curve_MiniCNN-32_unexplainable.csv"));
  EXPECT_EQ(unexpl[0], "method,tau,value");
  EXPECT_EQ(unexpl.size(), 1u + 4u * 2u);
}

TEST_F(HarnessRun, SeedChangesStochasticResultsOnly) {
  Json cfg = base_config();
  cfg["metrics"] = Json::parse(R"([{"metric": "pixel_bias", "methods": ["gi"], "permutations": 4}])");
  cfg["explainers"] = Json::parse(R"([{"method": "gi"}])");
  run_evaluation(config(1, "a", cfg));
  cfg["master_seed"] = 6;
  run_evaluation(config(1, "b", cfg));
  EXPECT_NE(read_text(dir / "a" / "results.csv"), read_text(dir / "b" / "results.csv"));
}

TEST_F(HarnessRun, FailuresAreIsolatedAndCounted) {
  // A zero baseline-distance image has a zero-norm GI map under an all-zero
  // image; pixel_bias then fails for that image alone.
  ImageSet set = testing::synthetic_cifar(4, 21);
  set.images[1] = Tensor(set.image_shape);
  write_file(dir / "batch.bin", encode_cifar_batch(set));
  Json cfg = base_config();
  cfg["explainers"] = Json::parse(R"([{"method": "gi"}, {"method": "grad"}])");
  cfg["metrics"] = Json::parse(R"([{"metric": "pixel_bias", "methods": ["gi"], "permutations": 4},
                                   {"metric": "mutual"}])");
  const RunSummary s = run_evaluation(config(1, "fail", cfg));
  ASSERT_FALSE(s.errors.empty());
  for (const auto& e : s.errors) EXPECT_EQ(e.image_id, "1");
  EXPECT_TRUE(s.over_budget);  // 1 of 3 images > 10%
  const auto err = lines(read_text(dir / "fail" / "errors.csv"));
  EXPECT_EQ(err[0], "model,image_id,method,metric,code,message");
  EXPECT_EQ(err.size(), 1u + s.errors.size());
  // Image 1 has no gi rows; the other images still report.
  for (const auto& row : lines(read_text(dir / "fail" / "results.csv"))) {
    const auto f = split(row);
    if (f[1] == "gi") {
      EXPECT_NE(f[6], "1");
    }
  }
}

}  // namespace
}  // namespace attrib
