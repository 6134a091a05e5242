#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lpu/error.hpp"
#include "lpu/vxe.hpp"
#include "oracle/reference_transformer.hpp"

using namespace lpu;

namespace {

std::vector<Half> halves(std::initializer_list<double> xs) {
  std::vector<Half> v;
  for (double x : xs) v.emplace_back(x);
  return v;
}

std::vector<Half> random_halves(std::size_t n, std::uint64_t seed, double lo = -4, double hi = 4) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Half> v;
  for (std::size_t i = 0; i < n; ++i) v.emplace_back(u(rng));
  return v;
}

// test-side restatement: softmax(x / T), keep the k largest, then the shortest
// descending prefix whose mass reaches p, renormalise
std::vector<double> expected_distribution(const std::vector<Half>& x, double t, int k, double p) {
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a].to_double() > x[b].to_double(); });
  idx.resize(std::min<std::size_t>(n, static_cast<std::size_t>(k)));
  std::vector<double> w;
  for (auto i : idx) w.push_back(std::exp((x[i].to_double() - x[idx[0]].to_double()) / t));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  std::size_t keep = w.size();
  double mass = 0;
  for (std::size_t j = 0; j < w.size(); ++j) {
    mass += w[j] / total;
    if (mass >= p) {
      keep = j + 1;
      break;
    }
  }
  const double kept = std::accumulate(w.begin(), w.begin() + static_cast<long>(keep), 0.0);
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < keep; ++j) out[idx[j]] = w[j] / kept;
  return out;
}

}  // namespace

TEST_CASE("softmax of one element is exactly one") {
  const auto y = vxe_softmax(halves({-3.5}), 1, 0.125);
  REQUIRE(y.size() == 1);
  CHECK(y[0].to_double() == 1.0);
}

TEST_CASE("softmax sums to one and follows the oracle") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const std::size_t n = 1 + seed * 13;
    const auto x = random_halves(n, seed, -8, 8);
    const double scale = 1.0 / std::sqrt(64.0);
    const auto y = vxe_softmax(x, n, scale);
    oracle::ExactSum s;
    for (Half h : y) s.add(h.to_double());
    CHECK(std::fabs(s.value() - 1.0) <= std::ldexp(1.0, -8));

    double m = -INFINITY;
    for (Half h : x) m = std::max(m, h.to_double() * scale);
    oracle::ExactSum z;
    for (Half h : x) z.add(std::exp(h.to_double() * scale - m));
    for (std::size_t i = 0; i < n; ++i) {
      const double want = std::exp(x[i].to_double() * scale - m) / z.value();
      CHECK(y[i] == Half(want));
    }
  }
}

TEST_CASE("adding zero is bit-exact") {
  const auto x = random_halves(257, 3, -60000, 60000);
  const std::vector<Half> zero(x.size(), Half(0.0));
  CHECK(vxe_add(x, zero, x.size()) == x);
  CHECK(vxe_add(zero, x, x.size()) == x);
}

TEST_CASE("element-wise ops round once") {
  const auto a = random_halves(100, 5), b = random_halves(100, 6);
  const auto sum = vxe_add(a, b, 100), prod = vxe_mul(a, b, 100), relu = vxe_relu(a, 100);
  const auto gelu = vxe_gelu(a, 100), silu = vxe_silu(a, 100);
  for (std::size_t i = 0; i < 100; ++i) {
    const double x = a[i].to_double(), y = b[i].to_double();
    CHECK(sum[i] == Half(x + y));
    CHECK(prod[i] == Half(x * y));
    CHECK(relu[i] == Half(x > 0 ? x : 0.0));
    CHECK(gelu[i] == Half(0.5 * x * (1 + std::erf(x / std::sqrt(2.0)))));
    CHECK(silu[i] == Half(x / (1 + std::exp(-x))));
  }
}

TEST_CASE("normalisation has zero mean and unit scale") {
  const std::size_t n = 256;
  const auto x = random_halves(n, 11, -3, 5);
  const std::vector<Half> one(n, Half(1.0)), zero(n, Half(0.0));
  const auto y = vxe_layernorm(x, one.data(), zero.data(), n);
  double mean = 0, sq = 0;
  for (Half h : y) mean += h.to_double();
  mean /= n;
  for (Half h : y) sq += (h.to_double() - mean) * (h.to_double() - mean);
  CHECK(std::fabs(mean) < 1e-3);
  CHECK(std::sqrt(sq / n) == doctest::Approx(1.0).epsilon(2e-3));
  const auto r = vxe_rmsnorm(x, one.data(), n);
  double rs = 0;
  for (Half h : r) rs += h.to_double() * h.to_double();
  CHECK(std::sqrt(rs / n) == doctest::Approx(1.0).epsilon(2e-3));
}

TEST_CASE("rotary embedding at position zero is the identity") {
  const auto x = random_halves(128, 9);
  CHECK(vxe_rope(x, 128, 32, 0, 10000.0) == x);
  const auto y = vxe_rope(x, 128, 32, 17, 10000.0);
  // each rotated pair keeps its length
  for (std::size_t i = 0; i < 128; i += 2) {
    const double a = std::hypot(x[i].to_double(), x[i + 1].to_double());
    const double b = std::hypot(y[i].to_double(), y[i + 1].to_double());
    CHECK(b == doctest::Approx(a).epsilon(2e-3));
  }
}

TEST_CASE("MAC accumulation is exact and order independent") {
  const auto a = random_halves(512, 21), b = random_halves(512, 22);
  oracle::ExactSum exact;
  for (std::size_t i = 0; i < a.size(); ++i) exact.add(a[i].to_double() * b[i].to_double());
  std::vector<std::size_t> order(a.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    MacAccumulator acc;
    for (auto i : order) acc.add_product(a[i], b[i]);
    CHECK(acc.result() == Half(exact.value()));
  }
  MacAccumulator tiny;
  tiny.add_product(Half::from_bits(0x0001), Half::from_bits(0x0001));  // 2^-48, below FP16 range
  CHECK(tiny.result().to_double() == 0.0);
  MacAccumulator big;
  big.add_product(Half(60000.0), Half(60000.0));
  CHECK(big.result().is_inf());
}

TEST_CASE("zero temperature is argmax with low ids winning ties") {
  const auto x = halves({0.5, 2.0, -1.0, 2.0, 1.5});
  CHECK(argmax_token(x, x.size()) == 1);
  CHECK(argmax_token(x, 1) == 0);
  Sampler s(SamplingParams{});
  for (int i = 0; i < 10; ++i) CHECK(s.sample(x, x.size()) == 1);
}

TEST_CASE("top-k of one is greedy at any temperature") {
  const auto x = random_halves(300, 8);
  SamplingParams p;
  p.temperature = 1.7;
  p.top_k = 1;
  p.seed = 99;
  Sampler s(p);
  for (int i = 0; i < 50; ++i) CHECK(s.sample(x, x.size()) == argmax_token(x, x.size()));
}

TEST_CASE("sampling distribution follows temperature, top-k and top-p") {
  const auto x = random_halves(40, 12, -3, 3);
  for (double t : {0.3, 1.0, 2.5})
    for (int k : {1, 5, 40})
      for (double p : {0.2, 0.9, 1.0}) {
        SamplingParams sp;
        sp.temperature = t;
        sp.top_k = k;
        sp.top_p = p;
        const auto got = sampling_distribution(x, x.size(), sp);
        const auto want = expected_distribution(x, t, k, p);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      }
}

TEST_CASE("empirical frequencies match the distribution within 3 sigma") {
  const auto x = halves({1.0, 0.5, 0.0, -0.5, 2.0, 1.2, -2.0, 0.1});
  SamplingParams p;
  p.temperature = 0.8;
  p.top_k = 6;
  p.top_p = 0.95;
  p.seed = 2024;
  const auto want = expected_distribution(x, p.temperature, p.top_k, p.top_p);
  Sampler s(p);
  const int draws = 100000;
  std::vector<int> hits(x.size(), 0);
  for (int i = 0; i < draws; ++i) ++hits[static_cast<std::size_t>(s.sample(x, x.size()))];
  for (std::size_t i = 0; i < x.size(); ++i) {
    CAPTURE(i);
    const double mu = draws * want[i];
    const double sigma = std::sqrt(draws * want[i] * (1 - want[i]));
    if (want[i] == 0.0)
      CHECK(hits[i] == 0);
    else
      CHECK(std::fabs(hits[i] - mu) <= 3 * sigma);
  }
}

TEST_CASE("same seed draws the same sequence") {
  const auto x = random_halves(64, 30, -1, 1);
  SamplingParams p;
  p.temperature = 1.0;
  p.seed = 5;
  Sampler a(p), b(p);
  p.seed = 6;
  Sampler c(p);
  bool differs = false;
  for (int i = 0; i < 200; ++i) {
    const int ta = a.sample(x, x.size());
    CHECK(ta == b.sample(x, x.size()));
    differs = differs || ta != c.sample(x, x.size());
  }
  CHECK(differs);
}

TEST_CASE("invalid sampling parameters") {
  auto bad = [](SamplingParams p) {
    try {
      validate_sampling(p);
      return false;
    } catch (const Error& e) {
      return e.kind() == ErrorKind::InvalidSamplingParams;
    }
  };
  SamplingParams p;
  p.temperature = -0.1;
  CHECK(bad(p));
  p = {};
  p.top_k = 0;
  CHECK(bad(p));
  p = {};
  p.top_p = 0.0;
  CHECK(bad(p));
  p = {};
  p.top_p = 1.5;
  CHECK(bad(p));
  p = {};
  p.temperature = NAN;
  CHECK(bad(p));
  CHECK_FALSE(bad(SamplingParams{}));
  SamplingParams q;
  q.top_k = -1;
  CHECK_THROWS_AS(Sampler{q}, Error);
}
