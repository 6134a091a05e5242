#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "lpu/half.hpp"

namespace lpu {

/// One MAC tree's accumulator. Every FP16 product is an integer multiple of
/// 2^-48, so products and biases are summed exactly in 128-bit fixed point and
/// rounded once (nearest-even) to FP16 at writeback. The result does not
/// depend on the order lanes or row tiles are added in.
class MacAccumulator {
 public:
  void add_product(Half a, Half b);
  void add(Half b);
  Half result() const;
  bool non_finite() const { return non_finite_; }

 private:
  __int128 acc_ = 0;
  bool non_finite_ = false;
  double fallback_ = 0.0;  // used only once a NaN/Inf operand is seen
};

/// Rounds an exact value acc * 2^-48 to FP16 (nearest-even).
Half round_fixed48(__int128 acc);

// --- VXE element-wise and reduction ops (double internally, FP16 out) ------------

constexpr double kNormEps = 1e-5;

std::vector<Half> vxe_softmax(const std::vector<Half>& x, std::size_t n, double scale);
std::vector<Half> vxe_layernorm(const std::vector<Half>& x, const Half* gamma, const Half* beta, std::size_t n);
std::vector<Half> vxe_rmsnorm(const std::vector<Half>& x, const Half* gamma, std::size_t n);
std::vector<Half> vxe_add(const std::vector<Half>& a, const std::vector<Half>& b, std::size_t n);
std::vector<Half> vxe_mul(const std::vector<Half>& a, const std::vector<Half>& b, std::size_t n);
std::vector<Half> vxe_relu(const std::vector<Half>& x, std::size_t n);
std::vector<Half> vxe_gelu(const std::vector<Half>& x, std::size_t n);
std::vector<Half> vxe_silu(const std::vector<Half>& x, std::size_t n);
/// Rotates consecutive element pairs of every head by pos * theta^(-2i/head_dim).
std::vector<Half> vxe_rope(const std::vector<Half>& x, std::size_t n, int head_dim, int pos, double theta);
std::vector<Half> vxe_embed(const std::vector<Half>& tok, const std::vector<Half>* pos, std::size_t n);

/// ceil(n / v) + fixed pipeline latency.
std::int64_t vxe_latency(std::int64_t n, int v, int fixed);

// --- sampler ----------------------------------------------------------------------

struct SamplingParams {
  double temperature = 0.0;  // 0 = greedy
  int top_k = std::numeric_limits<int>::max();
  double top_p = 1.0;
  std::uint64_t seed = 0;
};

/// Throws InvalidSamplingParams.
void validate_sampling(const SamplingParams& p);

/// Argmax with ties broken towards the lower token id.
int argmax_token(const std::vector<Half>& logits, std::size_t n);

class Sampler {
 public:
  explicit Sampler(const SamplingParams& p);
  /// Draws one token from the first n logits; the generator advances only for T > 0.
  int sample(const std::vector<Half>& logits, std::size_t n);
  const SamplingParams& params() const { return params_; }

 private:
  SamplingParams params_;
  std::mt19937_64 rng_;
};

/// Sampling distribution over token ids after temperature, top-k and top-p
/// (probabilities of the survivors, zero elsewhere). Exposed for tests.
std::vector<double> sampling_distribution(const std::vector<Half>& logits, std::size_t n, const SamplingParams& p);

}  // namespace lpu
