#include "mhvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mhvae/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace mhvae {

namespace {

constexpr double kU16Max = 65535.0;
constexpr double kHalfRange = 32767.5;

void require_keys(const json& node, const std::vector<std::string>& keys,
                  const std::string& where) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
      throw ConfigError("manifest: unknown key '" + it.key() + "' in " + where);
    }
  }
  for (const auto& k : keys) {
    if (!node.contains(k)) {
      throw ConfigError("manifest: missing key '" + k + "' in " + where);
    }
  }
}

// Separable Gaussian blur with edge clamping; small kernels only.
void gaussian_blur(std::vector<double>& img, int64_t h, int64_t w, double sigma) {
  int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double norm = 0;
  for (int64_t i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    norm += kernel[i + radius];
  }
  for (auto& k : kernel) k /= norm;

  std::vector<double> tmp(img.size());
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int64_t i = -radius; i <= radius; ++i) {
        int64_t xx = std::clamp<int64_t>(x + i, 0, w - 1);
        acc += kernel[i + radius] * img[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  }
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double acc = 0;
      for (int64_t i = -radius; i <= radius; ++i) {
        int64_t yy = std::clamp<int64_t>(y + i, 0, h - 1);
        acc += kernel[i + radius] * tmp[yy * w + x];
      }
      img[y * w + x] = acc;
    }
  }
}

Image16 to_image16(const std::vector<double>& values, int64_t h, int64_t w) {
  Image16 img;
  img.height = h;
  img.width = w;
  img.pixels.resize(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    double v = std::clamp(values[i], 0.0, 1.0) * kU16Max;
    img.pixels[i] = static_cast<uint16_t>(std::llround(v));
  }
  return img;
}

std::string sample_file(const std::string& id, const std::string& modality) {
  return "images/" + id + "_" + modality + ".png";
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("manifest " + path + " is not valid JSON: " + e.what());
  }
  require_keys(j, {"version", "geometry", "modalities", "split", "seed", "samples"}, "root");
  require_keys(j["geometry"], {"height", "width", "num_modalities"}, "geometry");

  DatasetManifest m;
  m.version = j["version"].get<int64_t>();
  if (m.version != 1) {
    throw ConfigError("manifest " + path + ": unsupported version " + std::to_string(m.version));
  }
  m.height = j["geometry"]["height"].get<int64_t>();
  m.width = j["geometry"]["width"].get<int64_t>();
  m.modalities = j["modalities"].get<std::vector<std::string>>();
  if (static_cast<int64_t>(m.modalities.size()) != j["geometry"]["num_modalities"].get<int64_t>()) {
    throw ConfigError("manifest " + path + ": num_modalities disagrees with modality list");
  }
  m.split = j["split"].get<std::string>();
  m.seed = j["seed"].get<uint64_t>();
  for (const auto& s : j["samples"]) {
    require_keys(s, {"id", "files"}, "sample");
    DatasetManifest::Sample sample;
    sample.id = s["id"].get<std::string>();
    for (const auto& mod : m.modalities) {
      if (!s["files"].contains(mod)) {
        throw ConfigError("manifest " + path + ": sample " + sample.id + " lacks modality " + mod);
      }
      sample.files.push_back(s["files"][mod].get<std::string>());
    }
    m.samples.push_back(std::move(sample));
  }
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  json j;
  j["version"] = manifest.version;
  j["geometry"] = {{"height", manifest.height},
                   {"width", manifest.width},
                   {"num_modalities", manifest.modalities.size()}};
  j["modalities"] = manifest.modalities;
  j["split"] = manifest.split;
  j["seed"] = manifest.seed;
  j["samples"] = json::array();
  for (const auto& s : manifest.samples) {
    json files;
    for (size_t m = 0; m < manifest.modalities.size(); ++m) {
      files[manifest.modalities[m]] = s.files[m];
    }
    j["samples"].push_back({{"id", s.id}, {"files", files}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path);
  out << j.dump(2) << "\n";
}

void validate_dataset(const DatasetManifest& manifest, const std::string& root) {
  std::set<std::string> ids;
  for (const auto& s : manifest.samples) {
    if (!ids.insert(s.id).second) {
      throw ConfigError("dataset: duplicate sample id " + s.id);
    }
    for (size_t m = 0; m < s.files.size(); ++m) {
      fs::path p = fs::path(root) / s.files[m];
      if (!fs::exists(p)) {
        throw IoError("dataset: sample " + s.id + " missing file " + p.string());
      }
      Image16 img;
      try {
        img = read_png16(p.string());
      } catch (const std::exception& e) {
        throw IoError("dataset: sample " + s.id + ": " + e.what());
      }
      if (img.height != manifest.height || img.width != manifest.width) {
        throw IoError("dataset: sample " + s.id + " file " + p.string() + " is " +
                      std::to_string(img.height) + "x" + std::to_string(img.width) +
                      ", expected " + std::to_string(manifest.height) + "x" +
                      std::to_string(manifest.width));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Normalization

torch::Tensor normalize_u16(const torch::Tensor& stored) {
  auto v = stored.to(torch::kFloat64);
  TORCH_CHECK(v.numel() == 0 || (v.min().item<double>() >= 0.0 && v.max().item<double>() <= kU16Max),
              "normalize_u16: values outside [0, 65535]");
  return (v / kHalfRange - 1.0).to(torch::kFloat32);
}

torch::Tensor denormalize_to_u16(const torch::Tensor& model_values) {
  auto v = model_values.to(torch::kFloat64);
  TORCH_CHECK(v.numel() == 0 || (v.min().item<double>() >= -1.0 - 1e-6 &&
                                 v.max().item<double>() <= 1.0 + 1e-6),
              "denormalize_to_u16: values outside [-1, 1]");
  return ((v + 1.0) * kHalfRange).round().clamp(0.0, kU16Max).to(torch::kInt32);
}

double normalize_value(double stored) {
  if (stored < 0.0 || stored > kU16Max) {
    throw std::invalid_argument("normalize_value: value outside [0, 65535]");
  }
  return stored / kHalfRange - 1.0;
}

int64_t denormalize_value(double model_value) {
  if (model_value < -1.0 - 1e-6 || model_value > 1.0 + 1e-6) {
    throw std::invalid_argument("denormalize_value: value outside [-1, 1]");
  }
  auto v = std::llround((model_value + 1.0) * kHalfRange);
  return std::clamp<int64_t>(v, 0, 65535);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

Scene make_scene(std::mt19937_64& rng, int64_t height, int64_t width) {
  std::uniform_int_distribution<int> count_dist(3, 6);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.height = height;
  scene.width = width;
  int num_regions = count_dist(rng);
  for (int i = 0; i < num_regions; ++i) {
    SceneRegion r;
    r.cx = (0.22 + 0.56 * unit(rng)) * width;
    r.cy = (0.22 + 0.56 * unit(rng)) * height;
    r.rx = (0.10 + 0.22 * unit(rng)) * width;
    r.ry = (0.10 + 0.22 * unit(rng)) * height;
    r.angle = unit(rng) * M_PI;
    r.intensity = 0.25 + 0.65 * unit(rng);
    scene.regions.push_back(r);
  }
  SceneRegion lesion;
  lesion.cx = (0.3 + 0.4 * unit(rng)) * width;
  lesion.cy = (0.3 + 0.4 * unit(rng)) * height;
  lesion.rx = (0.06 + 0.07 * unit(rng)) * width;
  lesion.ry = (0.06 + 0.07 * unit(rng)) * height;
  lesion.angle = unit(rng) * M_PI;
  lesion.intensity = 0.95;
  lesion.lesion = true;
  lesion.wobble_amp3 = 0.10 + 0.12 * unit(rng);
  lesion.wobble_phase3 = unit(rng) * 2.0 * M_PI;
  lesion.wobble_amp5 = 0.05 + 0.08 * unit(rng);
  lesion.wobble_phase5 = unit(rng) * 2.0 * M_PI;
  scene.regions.push_back(lesion);
  return scene;
}

std::vector<int32_t> region_ids(const Scene& scene) {
  std::vector<int32_t> ids(scene.height * scene.width, 0);
  for (size_t r = 0; r < scene.regions.size(); ++r) {
    const auto& reg = scene.regions[r];
    double ca = std::cos(reg.angle), sa = std::sin(reg.angle);
    for (int64_t y = 0; y < scene.height; ++y) {
      for (int64_t x = 0; x < scene.width; ++x) {
        double dx = x - reg.cx, dy = y - reg.cy;
        double u = (dx * ca + dy * sa) / reg.rx;
        double v = (-dx * sa + dy * ca) / reg.ry;
        double rho = std::sqrt(u * u + v * v);
        double boundary = 1.0;
        if (reg.wobble_amp3 > 0 || reg.wobble_amp5 > 0) {
          double phi = std::atan2(v, u);
          boundary += reg.wobble_amp3 * std::sin(3.0 * phi + reg.wobble_phase3) +
                      reg.wobble_amp5 * std::sin(5.0 * phi + reg.wobble_phase5);
        }
        if (rho <= boundary) ids[y * scene.width + x] = static_cast<int32_t>(r + 1);
      }
    }
  }
  return ids;
}

std::pair<Image16, Image16> render_modalities(const Scene& scene, std::mt19937_64& rng) {
  const int64_t h = scene.height, w = scene.width;
  auto ids = region_ids(scene);

  // Modality A: tissue intensities, mild blur, faint sensor noise.
  std::vector<double> a(h * w, 0.08);
  for (int64_t i = 0; i < h * w; ++i) {
    if (ids[i] > 0) a[i] = scene.regions[ids[i] - 1].intensity;
  }
  gaussian_blur(a, h, w, 1.0);
  std::normal_distribution<double> sensor(0.0, 0.008);
  for (auto& v : a) v += sensor(rng);

  // Modality B: inverted-contrast echogenicity with bright region
  // boundaries, multiplicative speckle, and a radial falloff.
  std::vector<double> echo(h * w, 0.30);
  for (int64_t i = 0; i < h * w; ++i) {
    if (ids[i] > 0) {
      const auto& reg = scene.regions[ids[i] - 1];
      echo[i] = reg.lesion ? 0.12 : 0.25 + 0.55 * (1.0 - reg.intensity);
    }
  }
  std::vector<double> edges(h * w, 0.0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      int32_t c = ids[y * w + x];
      bool boundary = (x + 1 < w && ids[y * w + x + 1] != c) ||
                      (x > 0 && ids[y * w + x - 1] != c) ||
                      (y + 1 < h && ids[(y + 1) * w + x] != c) ||
                      (y > 0 && ids[(y - 1) * w + x] != c);
      if (boundary) edges[y * w + x] = 1.0;
    }
  }
  gaussian_blur(edges, h, w, 0.7);
  double edge_peak = *std::max_element(edges.begin(), edges.end());
  if (edge_peak > 0) {
    for (auto& e : edges) e /= edge_peak;
  }

  std::gamma_distribution<double> speckle(16.0, 1.0 / 16.0);
  double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  double rmax2 = cx * cx + cy * cy;
  std::vector<double> b(h * w, 0.0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      int64_t i = y * w + x;
      double base = std::max(echo[i], 0.92 * edges[i]);
      double r2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / rmax2;
      b[i] = base * speckle(rng) * (1.0 - 0.45 * r2);
    }
  }

  return {to_image16(a, h, w), to_image16(b, h, w)};
}

DatasetManifest generate_synthetic(const SyntheticOptions& options, const std::string& out_dir) {
  TORCH_CHECK(options.count >= 1, "generate_synthetic: count must be >= 1");
  auto power_of_two = [](int64_t v) { return v >= 16 && (v & (v - 1)) == 0; };
  TORCH_CHECK(power_of_two(options.height) && power_of_two(options.width),
              "generate_synthetic: size must be a power of two >= 16");

  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("generate_synthetic: cannot create " + out_dir + ": " + ec.message());

  DatasetManifest manifest;
  manifest.height = options.height;
  manifest.width = options.width;
  manifest.modalities = {"A", "B"};
  manifest.split = options.split;
  manifest.seed = options.seed;

  std::mt19937_64 rng(options.seed);
  for (int64_t i = 0; i < options.count; ++i) {
    auto scene = make_scene(rng, options.height, options.width);
    auto [img_a, img_b] = render_modalities(scene, rng);

    char id[64];
    std::snprintf(id, sizeof(id), "%s_%04lld", options.split.c_str(),
                  static_cast<long long>(i));
    DatasetManifest::Sample sample;
    sample.id = id;
    sample.files = {sample_file(sample.id, "A"), sample_file(sample.id, "B")};
    write_png16((fs::path(out_dir) / sample.files[0]).string(), img_a);
    write_png16((fs::path(out_dir) / sample.files[1]).string(), img_b);
    manifest.samples.push_back(std::move(sample));
  }
  save_manifest(manifest, (fs::path(out_dir) / "manifest.json").string());
  return manifest;
}

// ---------------------------------------------------------------------------
// Loading and iteration

LoadedDataset load_dataset(const std::string& manifest_path) {
  LoadedDataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.root = fs::path(manifest_path).parent_path().string();

  int64_t n = ds.size();
  int64_t M = ds.num_modalities();
  for (int64_t m = 0; m < M; ++m) {
    ds.stored.push_back(
        torch::empty({n, 1, ds.manifest.height, ds.manifest.width}, torch::kInt32));
  }
  for (int64_t i = 0; i < n; ++i) {
    const auto& sample = ds.manifest.samples[i];
    for (int64_t m = 0; m < M; ++m) {
      Image16 img;
      try {
        img = read_png16((fs::path(ds.root) / sample.files[m]).string());
      } catch (const std::exception& e) {
        throw IoError("sample " + sample.id + ": " + e.what());
      }
      if (img.height != ds.manifest.height || img.width != ds.manifest.width) {
        throw IoError("sample " + sample.id + ": geometry mismatch in " + sample.files[m]);
      }
      auto row = ds.stored[m][i][0];
      auto acc = row.accessor<int32_t, 2>();
      for (int64_t y = 0; y < img.height; ++y) {
        for (int64_t x = 0; x < img.width; ++x) {
          acc[y][x] = img.pixels[y * img.width + x];
        }
      }
    }
  }
  for (int64_t m = 0; m < M; ++m) {
    ds.images.push_back(normalize_u16(ds.stored[m]));
  }
  return ds;
}

std::vector<std::vector<int64_t>> epoch_batches(int64_t num_samples, int64_t batch_size,
                                                uint64_t shuffle_seed, int64_t epoch) {
  TORCH_CHECK(batch_size >= 1, "epoch_batches: batch_size must be >= 1");
  std::vector<int64_t> order(num_samples);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<uint64_t>(shuffle_seed), static_cast<uint64_t>(epoch) + 1};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < num_samples; start += batch_size) {
    int64_t end = std::min(num_samples, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

std::vector<torch::Tensor> gather_batch(const LoadedDataset& dataset,
                                        const std::vector<int64_t>& indices) {
  auto idx = torch::tensor(indices, torch::kLong);
  std::vector<torch::Tensor> out;
  out.reserve(dataset.images.size());
  for (const auto& imgs : dataset.images) {
    out.push_back(imgs.index_select(0, idx));
  }
  return out;
}

}  // namespace mhvae
