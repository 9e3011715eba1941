#include "mhvae/metrics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>

#include "mhvae/errors.hpp"

namespace mhvae {

namespace {

namespace F = torch::nn::functional;

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g).reshape({1, 1, size, size});
}

}  // namespace

double psnr(const torch::Tensor& reference, const torch::Tensor& test, double data_range) {
  TORCH_CHECK(reference.sizes() == test.sizes(),
              "psnr: shape mismatch ", reference.sizes(), " vs ", test.sizes());
  TORCH_CHECK(data_range > 0, "psnr: data_range must be positive");
  auto ref = reference.to(torch::kFloat64);
  auto diff = ref - test.to(torch::kFloat64);
  double mse = (diff * diff).mean().item<double>();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / mse);
}

double ssim(const torch::Tensor& reference, const torch::Tensor& test, double data_range,
            int64_t window_size, double k1, double k2) {
  TORCH_CHECK(reference.sizes() == test.sizes(),
              "ssim: shape mismatch ", reference.sizes(), " vs ", test.sizes());
  TORCH_CHECK(reference.dim() == 2, "ssim: expected 2-D images, got ", reference.dim(), "-D");
  TORCH_CHECK(window_size >= 3 && window_size % 2 == 1, "ssim: window must be odd and >= 3");
  TORCH_CHECK(reference.size(0) >= window_size && reference.size(1) >= window_size,
              "ssim: window ", window_size, " does not fit image ", reference.sizes());

  auto x = reference.to(torch::kFloat64).reshape({1, 1, reference.size(0), reference.size(1)});
  auto y = test.to(torch::kFloat64).reshape_as(x);
  auto w = gaussian_window(window_size, window_size / 6.4);

  auto conv = [&](const torch::Tensor& t) { return F::conv2d(t, w); };
  auto mu_x = conv(x);
  auto mu_y = conv(y);
  auto var_x = conv(x * x) - mu_x * mu_x;
  auto var_y = conv(y * y) - mu_y * mu_y;
  auto cov = conv(x * y) - mu_x * mu_y;

  double c1 = (k1 * data_range) * (k1 * data_range);
  double c2 = (k2 * data_range) * (k2 * data_range);
  auto map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) /
             ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
  return map.mean().item<double>();
}

std::string subset_label(const Subset& subset, const std::vector<std::string>& modality_names) {
  std::string label;
  for (int64_t m : subset) {
    if (!label.empty()) label += "+";
    label += modality_names[m];
  }
  return label.empty() ? "-" : label;
}

MetricReport evaluate(GenerativeModel& model, const LoadedDataset& test_set,
                      const std::vector<Subset>& subsets, int64_t eval_batch) {
  TORCH_CHECK(test_set.num_modalities() == model.num_modalities(),
              "evaluate: dataset has ", test_set.num_modalities(), " modalities, model has ",
              model.num_modalities());
  torch::NoGradGuard no_grad;

  MetricReport report;
  int64_t n = test_set.size();
  int64_t M = model.num_modalities();

  for (int64_t start = 0; start < n; start += eval_batch) {
    int64_t b = std::min(eval_batch, n - start);
    std::vector<int64_t> indices(b);
    std::iota(indices.begin(), indices.end(), start);
    auto batch = gather_batch(test_set, indices);

    auto noise = NoiseSource::zero();
    auto passes = model.run_subsets(batch, subsets, noise);

    for (size_t s = 0; s < subsets.size(); ++s) {
      auto label = subset_label(subsets[s], test_set.manifest.modalities);
      for (int64_t target = 0; target < M; ++target) {
        auto pred_u16 = denormalize_to_u16(passes[s].decoded[target]).to(torch::kFloat64);
        auto ref_u16 = test_set.stored[target]
                           .index_select(0, torch::tensor(indices, torch::kLong))
                           .to(torch::kFloat64);
        for (int64_t i = 0; i < b; ++i) {
          MetricRow row;
          row.sample_id = test_set.manifest.samples[start + i].id;
          row.subset = label;
          row.target_modality = test_set.manifest.modalities[target];
          row.psnr_db = psnr(ref_u16[i][0], pred_u16[i][0], 65535.0);
          row.ssim = ssim(ref_u16[i][0], pred_u16[i][0], 65535.0);
          report.rows.push_back(std::move(row));
        }
      }
    }
  }

  // Aggregate mean and (sample) standard deviation per subset/target/metric.
  std::map<std::pair<std::string, std::string>, std::vector<const MetricRow*>> groups;
  for (const auto& row : report.rows) {
    groups[{row.subset, row.target_modality}].push_back(&row);
  }
  for (const auto& [key, rows] : groups) {
    for (const char* metric : {"psnr", "ssim"}) {
      double sum = 0;
      for (auto* r : rows) sum += (metric[0] == 'p') ? r->psnr_db : r->ssim;
      double mean = sum / rows.size();
      double sq = 0;
      for (auto* r : rows) {
        double v = ((metric[0] == 'p') ? r->psnr_db : r->ssim) - mean;
        sq += v * v;
      }
      double sd = rows.size() > 1 ? std::sqrt(sq / (rows.size() - 1)) : 0.0;
      report.summary.push_back({key.first, key.second, metric, mean, sd});
    }
  }
  return report;
}

void write_metric_csvs(const MetricReport& report, const std::string& per_sample_path,
                       const std::string& summary_path) {
  std::ofstream per(per_sample_path);
  if (!per) throw IoError("cannot write " + per_sample_path);
  per << "sample_id,subset,target_modality,psnr_db,ssim\n";
  for (const auto& r : report.rows) {
    per << r.sample_id << "," << r.subset << "," << r.target_modality << ","
        << format_metric(r.psnr_db) << "," << format_metric(r.ssim) << "\n";
  }

  std::ofstream sum(summary_path);
  if (!sum) throw IoError("cannot write " + summary_path);
  sum << "subset,target_modality,metric,mean,std\n";
  for (const auto& r : report.summary) {
    sum << r.subset << "," << r.target_modality << "," << r.metric << ","
        << format_metric(r.mean) << "," << format_metric(r.std_dev) << "\n";
  }
}

}  // namespace mhvae
