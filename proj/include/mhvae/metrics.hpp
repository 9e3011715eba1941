#pragma once

#include <torch/torch.h>

#include <string>
#include <vector>

#include "mhvae/data.hpp"
#include "mhvae/model.hpp"

namespace mhvae {

/// Peak signal-to-noise ratio in decibels; +inf for identical inputs.
double psnr(const torch::Tensor& reference, const torch::Tensor& test, double data_range);

/// Mean local structural similarity with a Gaussian window
/// (sigma = window_size / 6.4). Symmetric; 1 iff the images are identical.
double ssim(const torch::Tensor& reference, const torch::Tensor& test, double data_range,
            int64_t window_size = 11, double k1 = 0.01, double k2 = 0.03);

struct MetricRow {
  std::string sample_id;
  std::string subset;
  std::string target_modality;
  double psnr_db = 0;
  double ssim = 0;
};

struct MetricSummaryRow {
  std::string subset;
  std::string target_modality;
  std::string metric;
  double mean = 0;
  double std_dev = 0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<MetricSummaryRow> summary;
};

std::string subset_label(const Subset& subset, const std::vector<std::string>& modality_names);

/// Decode every subset/target combination over the test set with zero
/// noise, compare against ground truth in stored 16-bit space, and
/// aggregate mean/std per (subset, target, metric).
MetricReport evaluate(GenerativeModel& model, const LoadedDataset& test_set,
                      const std::vector<Subset>& subsets, int64_t eval_batch = 16);

/// `inf` is written literally for infinite values.
void write_metric_csvs(const MetricReport& report, const std::string& per_sample_path,
                       const std::string& summary_path);

}  // namespace mhvae
