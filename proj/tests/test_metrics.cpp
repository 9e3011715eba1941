#include <filesystem>
#include <fstream>

#include "mhvae/data.hpp"
#include "mhvae/metrics.hpp"
#include "mhvae/networks.hpp"

// doctest last: its assertion macros must win over the c10 logging macros
#undef CHECK
#include <doctest.h>

namespace fs = std::filesystem;
using namespace mhvae;

namespace {

torch::Tensor rand_image(int64_t h, int64_t w, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({h, w}, gen, torch::kFloat64) * 2.0 - 1.0;
}

}  // namespace

TEST_CASE("psnr: sentinel, constant gap, and formula boundary") {
  auto x = rand_image(32, 32, 1);
  CHECK(std::isinf(psnr(x, x, 2.0)));

  auto a = torch::full({16, 16}, 0.5, torch::kFloat64);
  auto b = torch::full({16, 16}, -0.5, torch::kFloat64);
  CHECK(psnr(a, b, 2.0) == doctest::Approx(6.0206).epsilon(1e-4));

  auto zero = torch::zeros({16, 16}, torch::kFloat64);
  auto full = torch::full({16, 16}, 2.0, torch::kFloat64);
  CHECK(psnr(zero, full, 2.0) == doctest::Approx(0.0));

  CHECK_THROWS_AS(psnr(a, torch::zeros({4, 4}, torch::kFloat64), 2.0), c10::Error);
}

TEST_CASE("psnr strictly decreases as noise grows") {
  auto ref = rand_image(64, 64, 2);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto noise = torch::randn({64, 64}, gen, torch::kFloat64);
  double last = std::numeric_limits<double>::infinity();
  for (double amp : {0.01, 0.03, 0.1, 0.3, 1.0}) {
    double v = psnr(ref, ref + amp * noise, 2.0);
    CHECK(v < last);
    last = v;
  }
}

TEST_CASE("ssim: identity is exactly one, symmetry is exact") {
  auto x = rand_image(48, 48, 4);
  CHECK(ssim(x, x, 2.0) == 1.0);

  auto y = rand_image(48, 48, 5);
  CHECK(std::abs(ssim(x, y, 2.0) - ssim(y, x, 2.0)) < 1e-12);

  CHECK_THROWS_AS(ssim(x, rand_image(32, 32, 6), 2.0), c10::Error);
  CHECK_THROWS_AS(ssim(rand_image(8, 8, 7), rand_image(8, 8, 8), 2.0, 11), c10::Error);
}

TEST_CASE("ssim of a zero-mean pattern against its negation is negative") {
  auto yy = torch::arange(64, torch::kFloat64).reshape({64, 1}).expand({64, 64});
  auto xx = torch::arange(64, torch::kFloat64).reshape({1, 64}).expand({64, 64});
  auto pattern = 0.8 * torch::sin(xx * (2.0 * M_PI / 4.0)) * torch::sin(yy * (2.0 * M_PI / 4.0));
  CHECK(ssim(pattern, -pattern, 2.0) < 0.0);
}

TEST_CASE("ssim: adding the same constant leaves the score stable") {
  auto x = 0.4 * rand_image(48, 48, 9) - 0.2;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(10);
  auto y = x + 1e-5 * torch::randn({48, 48}, gen, torch::kFloat64);
  double base = ssim(x, y, 2.0);
  double shifted = ssim(x + 0.2, y + 0.2, 2.0);
  CHECK(std::abs(base - shifted) < 1e-6);
}

TEST_CASE("evaluate: full subset/target grid with deterministic output") {
  auto dir = fs::temp_directory_path() / "mhvae_tests" / "metrics_eval";
  fs::remove_all(dir);
  SyntheticOptions options;
  options.count = 6;
  options.seed = 31;
  options.height = options.width = 16;
  options.split = "test";
  generate_synthetic(options, dir.string());
  auto ds = load_dataset((dir / "manifest.json").string());

  torch::manual_seed(21);
  ArchOptions arch;
  arch.image_size = 16;
  arch.base_width = 8;
  arch.max_width = 16;
  arch.decoder_channels = 8;
  MhvaeModel model(HierarchySpec::ladder(3, 16, 4), arch, 2, false);
  model->eval();

  auto subsets = enumerate_subsets(2);
  auto report = evaluate(*model, ds, subsets);
  CHECK(report.rows.size() == subsets.size() * 2 * 6);
  CHECK(report.summary.size() == subsets.size() * 2 * 2);

  auto again = evaluate(*model, ds, subsets);
  for (size_t i = 0; i < report.rows.size(); ++i) {
    CHECK(report.rows[i].psnr_db == again.rows[i].psnr_db);
    CHECK(report.rows[i].ssim == again.rows[i].ssim);
  }

  for (const auto& row : report.summary) CHECK(row.std_dev >= 0.0);
}

TEST_CASE("metric CSVs serialize +inf as the literal inf") {
  MetricReport report;
  report.rows.push_back({"s0", "A", "B", std::numeric_limits<double>::infinity(), 1.0});
  report.summary.push_back({"A", "B", "psnr", std::numeric_limits<double>::infinity(), 0.0});

  auto dir = fs::temp_directory_path() / "mhvae_tests" / "metrics_csv";
  fs::create_directories(dir);
  auto per_sample = (dir / "per_sample.csv").string();
  auto summary = (dir / "summary.csv").string();
  write_metric_csvs(report, per_sample, summary);

  std::ifstream in(per_sample);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "sample_id,subset,target_modality,psnr_db,ssim");
  CHECK(line == "s0,A,B,inf,1");

  std::ifstream sin(summary);
  std::getline(sin, header);
  CHECK(header == "subset,target_modality,metric,mean,std");
  std::getline(sin, line);
  CHECK(line.find("inf") != std::string::npos);
}
