#include <cmath>
#include <random>

#include "mhvae/gaussian.hpp"
#include "support/oracles.hpp"

// doctest last: its assertion macros must win over the c10 logging macros
#undef CHECK
#include <doctest.h>

using namespace mhvae;

namespace {

DiagGaussian scalar_gaussian(double mean, double var) {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  return {torch::full({1}, mean, opts), torch::full({1}, std::log(var), opts)};
}

double kl_value(const DiagGaussian& q, const DiagGaussian& p) {
  return kl_divergence(q, p).item<double>();
}

}  // namespace

TEST_CASE("kl_divergence matches the closed form on scalar cases") {
  CHECK(kl_value(scalar_gaussian(0, 1), scalar_gaussian(0, 1)) == doctest::Approx(0.0));
  CHECK(kl_value(scalar_gaussian(1, 1), scalar_gaussian(0, 1)) == doctest::Approx(0.5));
  // q = N(0, e): KL = (e - 2) / 2
  CHECK(kl_value(scalar_gaussian(0, std::exp(1.0)), scalar_gaussian(0, 1)) ==
        doctest::Approx((std::exp(1.0) - 2.0) / 2.0).epsilon(1e-10));
}

TEST_CASE("kl_divergence agrees with a Monte Carlo estimate") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> mean_dist(-2, 2), var_dist(0.3, 3.0);
  for (int rep = 0; rep < 5; ++rep) {
    double mq = mean_dist(rng), vq = var_dist(rng);
    double mp = mean_dist(rng), vp = var_dist(rng);
    double se = 0;
    double mc = oracles::kl_monte_carlo({mq}, {vq}, {mp}, {vp}, 100000, 1000 + rep, &se);
    double analytic = kl_value(scalar_gaussian(mq, vq), scalar_gaussian(mp, vp));
    CHECK(std::abs(analytic - mc) < 3.0 * se + 1e-12);
  }
}

TEST_CASE("kl_divergence rejects bad inputs") {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  DiagGaussian a = DiagGaussian::standard({2, 3}, opts);
  DiagGaussian b = DiagGaussian::standard({3, 2}, opts);
  CHECK_THROWS_AS(kl_divergence(a, b), c10::Error);

  DiagGaussian bad(torch::full({2}, std::nan(""), opts), torch::zeros({2}, opts));
  DiagGaussian ok = DiagGaussian::standard({2}, opts);
  CHECK_THROWS_AS(kl_divergence(bad, ok), c10::Error);
  CHECK_THROWS_AS(kl_divergence(ok, bad), c10::Error);
}

TEST_CASE("kl_divergence identity and non-negativity properties") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> mean_dist(-3, 3), lv_dist(-2, 2);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  for (int rep = 0; rep < 50; ++rep) {
    auto mean = torch::empty({8}, opts);
    auto lv = torch::empty({8}, opts);
    for (int i = 0; i < 8; ++i) {
      mean[i] = mean_dist(rng);
      lv[i] = lv_dist(rng);
    }
    DiagGaussian q(mean, lv);
    CHECK(std::abs(kl_value(q, q)) <= 1e-12 * 8);

    auto mean2 = torch::empty({8}, opts);
    auto lv2 = torch::empty({8}, opts);
    for (int i = 0; i < 8; ++i) {
      mean2[i] = mean_dist(rng);
      lv2[i] = lv_dist(rng);
    }
    DiagGaussian p(mean2, lv2);
    CHECK(kl_value(q, p) >= -1e-12 * 8);
  }
}

TEST_CASE("poe_fuse closed-form examples") {
  auto prior = scalar_gaussian(0, 1);

  SUBCASE("empty expert set returns the prior") {
    auto fused = poe_fuse(prior, {});
    CHECK(fused.mean.item<double>() == 0.0);
    CHECK(fused.log_var.item<double>() == 0.0);
  }
  SUBCASE("single expert") {
    auto fused = poe_fuse(prior, {scalar_gaussian(2, 1)});
    CHECK(fused.mean.item<double>() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fused.variance().item<double>() == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("two identical experts") {
    auto fused = poe_fuse(prior, {scalar_gaussian(0, 1), scalar_gaussian(0, 1)});
    CHECK(fused.mean.item<double>() == doctest::Approx(0.0));
    CHECK(fused.variance().item<double>() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("poe_fuse matches the grid-normalization reference") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> mean_dist(-3, 3), var_dist(0.1, 10.0);
  std::uniform_int_distribution<int> count_dist(1, 4);
  for (int rep = 0; rep < 25; ++rep) {
    oracles::Gauss1D prior{mean_dist(rng), var_dist(rng)};
    std::vector<oracles::Gauss1D> experts(count_dist(rng));
    for (auto& e : experts) e = {mean_dist(rng), var_dist(rng)};

    auto ref = oracles::product_grid(prior, experts);
    std::vector<DiagGaussian> expert_gs;
    for (auto& e : experts) expert_gs.push_back(scalar_gaussian(e.mean, e.var));
    auto fused = poe_fuse(scalar_gaussian(prior.mean, prior.var), expert_gs);

    CHECK(std::abs(fused.mean.item<double>() - ref.mean) < 1e-6);
    CHECK(std::abs(fused.variance().item<double>() - ref.var) < 1e-6);
  }
}

TEST_CASE("poe_fuse properties: additivity, permutation, variance contraction") {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> mean_dist(-3, 3), lv_dist(-2, 2);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto random_gaussian = [&](int64_t n) {
    auto mean = torch::empty({n}, opts);
    auto lv = torch::empty({n}, opts);
    for (int64_t i = 0; i < n; ++i) {
      mean[i] = mean_dist(rng);
      lv[i] = lv_dist(rng);
    }
    return DiagGaussian(mean, lv);
  };

  for (int rep = 0; rep < 20; ++rep) {
    auto prior = random_gaussian(6);
    std::vector<DiagGaussian> e1 = {random_gaussian(6), random_gaussian(6)};
    std::vector<DiagGaussian> e2 = {random_gaussian(6)};

    std::vector<DiagGaussian> all = e1;
    all.insert(all.end(), e2.begin(), e2.end());
    auto joint = poe_fuse(prior, all);
    auto staged = poe_fuse(poe_fuse(prior, e1), e2);
    CHECK(torch::allclose(joint.variance(), staged.variance(), 0.0, 1e-10));
    CHECK(torch::allclose(joint.mean, staged.mean, 0.0, 1e-10));

    std::vector<DiagGaussian> reversed(all.rbegin(), all.rend());
    auto permuted = poe_fuse(prior, reversed);
    CHECK(torch::allclose(joint.mean, permuted.mean, 0.0, 1e-12));
    CHECK(torch::allclose(joint.log_var, permuted.log_var, 0.0, 1e-12));

    CHECK((joint.variance() <= prior.variance() + 1e-15).all().item<bool>());
  }
}

TEST_CASE("poe_fuse_masked: all-ones gates match poe_fuse, zero gates drop experts") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> mean_dist(-2, 2), lv_dist(-1, 1);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto random_gaussian = [&] {
    auto mean = torch::empty({4}, opts);
    auto lv = torch::empty({4}, opts);
    for (int64_t i = 0; i < 4; ++i) {
      mean[i] = mean_dist(rng);
      lv[i] = lv_dist(rng);
    }
    return DiagGaussian(mean, lv);
  };
  auto prior = random_gaussian();
  std::vector<DiagGaussian> experts = {random_gaussian(), random_gaussian()};
  auto ones = torch::ones({4}, opts);
  auto zeros = torch::zeros({4}, opts);

  auto gated = poe_fuse_masked(prior, experts, {ones, ones});
  auto plain = poe_fuse(prior, experts);
  CHECK(torch::allclose(gated.mean, plain.mean, 0.0, 1e-12));
  CHECK(torch::allclose(gated.log_var, plain.log_var, 0.0, 1e-12));

  auto dropped = poe_fuse_masked(prior, experts, {ones, zeros});
  auto only_first = poe_fuse(prior, {experts[0]});
  CHECK(torch::allclose(dropped.mean, only_first.mean, 0.0, 1e-12));
  CHECK(torch::allclose(dropped.log_var, only_first.log_var, 0.0, 1e-12));
}

TEST_CASE("sample: reparameterized draws") {
  CHECK(sample(scalar_gaussian(3, 4), torch::zeros({1}, torch::kFloat64)).item<double>() ==
        doctest::Approx(3.0));
  CHECK(sample(scalar_gaussian(0, 4), torch::ones({1}, torch::kFloat64)).item<double>() ==
        doctest::Approx(2.0));
  CHECK(sample(scalar_gaussian(1, 1), -torch::ones({1}, torch::kFloat64)).item<double>() ==
        doctest::Approx(0.0));
  CHECK_THROWS_AS(sample(scalar_gaussian(0, 1), torch::zeros({2}, torch::kFloat64)), c10::Error);
}

TEST_CASE("gradients of kl_divergence and sample match finite differences") {
  std::mt19937_64 rng(55);
  std::uniform_real_distribution<double> mean_dist(-2, 2), lv_dist(-1.5, 1.5), noise_dist(-1, 1);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const double h = 1e-5;

  for (int rep = 0; rep < 10; ++rep) {
    double vals[4] = {mean_dist(rng), lv_dist(rng), mean_dist(rng), lv_dist(rng)};
    auto mk = [&](double v) { return torch::full({1}, v, opts).requires_grad_(true); };
    auto mq = mk(vals[0]), lq = mk(vals[1]), mp = mk(vals[2]), lp = mk(vals[3]);
    auto kl = kl_divergence({mq, lq}, {mp, lp});
    kl.backward();

    torch::Tensor grads[4] = {mq.grad(), lq.grad(), mp.grad(), lp.grad()};
    for (int arg = 0; arg < 4; ++arg) {
      auto f = [&](double x) {
        double v[4] = {vals[0], vals[1], vals[2], vals[3]};
        v[arg] = x;
        torch::NoGradGuard ng;
        return kl_divergence({torch::full({1}, v[0], opts), torch::full({1}, v[1], opts)},
                             {torch::full({1}, v[2], opts), torch::full({1}, v[3], opts)})
            .item<double>();
      };
      double fd = oracles::central_difference(f, vals[arg], h);
      double an = grads[arg].item<double>();
      CHECK(std::abs(an - fd) <= 1e-6 * std::max({1.0, std::abs(an), std::abs(fd)}));
    }

    double svals[3] = {mean_dist(rng), lv_dist(rng), noise_dist(rng)};
    auto sm = mk(svals[0]), sl = mk(svals[1]);
    auto noise = torch::full({1}, svals[2], opts);
    auto s = sample({sm, sl}, noise);
    s.backward();
    for (int arg = 0; arg < 2; ++arg) {
      auto f = [&](double x) {
        double v[2] = {svals[0], svals[1]};
        v[arg] = x;
        torch::NoGradGuard ng;
        return sample({torch::full({1}, v[0], opts), torch::full({1}, v[1], opts)}, noise)
            .item<double>();
      };
      double fd = oracles::central_difference(f, svals[arg], h);
      double an = (arg == 0 ? sm : sl).grad().item<double>();
      CHECK(std::abs(an - fd) <= 1e-6 * std::max({1.0, std::abs(an), std::abs(fd)}));
    }
  }
}
