#include "lpu/vxe.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "lpu/error.hpp"

namespace lpu {

namespace {

// FP16 value as (integer significand, shift) with value * 2^48 = sig << shift.
inline void fixed_parts(Half h, std::int64_t& sig, int& shift) {
  const int e = (h.bits >> 10) & 0x1F;
  const std::int64_t m = h.bits & 0x3FF;
  if (e == 0) {
    sig = m;
    shift = 24;
  } else {
    sig = m | 0x400;
    shift = e + 23;
  }
  if (h.bits & 0x8000) sig = -sig;
}

}  // namespace

void MacAccumulator::add_product(Half a, Half b) {
  if (!a.is_finite() || !b.is_finite() || non_finite_) {
    if (!non_finite_) fallback_ = static_cast<double>(acc_) * 0x1p-48;
    non_finite_ = true;
    fallback_ += a.to_double() * b.to_double();
    return;
  }
  std::int64_t sa, sb;
  int ea, eb;
  fixed_parts(a, sa, ea);
  fixed_parts(b, sb, eb);
  acc_ += static_cast<__int128>(sa * sb) << (ea + eb - 48);
}

void MacAccumulator::add(Half b) {
  if (!b.is_finite() || non_finite_) {
    if (!non_finite_) fallback_ = static_cast<double>(acc_) * 0x1p-48;
    non_finite_ = true;
    fallback_ += b.to_double();
    return;
  }
  std::int64_t s;
  int e;
  fixed_parts(b, s, e);
  acc_ += static_cast<__int128>(s) << e;
}

Half MacAccumulator::result() const {
  if (non_finite_) return Half(fallback_);
  return round_fixed48(acc_);
}

Half round_fixed48(__int128 acc) {
  if (acc == 0) return Half::from_bits(0);
  const bool neg = acc < 0;
  auto mag = static_cast<unsigned __int128>(neg ? -acc : acc);
  const auto hi = static_cast<std::uint64_t>(mag >> 64);
  const int msb = hi != 0 ? 127 - std::countl_zero(hi) : 63 - std::countl_zero(static_cast<std::uint64_t>(mag));
  const int exp = msb - 48;                 // unbiased exponent of the leading bit
  const int ulp = std::max(exp - 10, -24);  // FP16 ulp exponent at this magnitude
  const int shift = ulp + 48;               // >= 24
  auto q = static_cast<std::uint64_t>(mag >> shift);
  const unsigned __int128 rem = mag & ((static_cast<unsigned __int128>(1) << shift) - 1);
  const unsigned __int128 halfway = static_cast<unsigned __int128>(1) << (shift - 1);
  if (rem > halfway || (rem == halfway && (q & 1u))) ++q;
  const double v = std::ldexp(static_cast<double>(q), ulp);  // exact, or beyond FP16 range
  return Half(neg ? -v : v);
}

// -----------------------------------------------------------------------------

std::vector<Half> vxe_softmax(const std::vector<Half>& x, std::size_t n, double scale) {
  std::vector<Half> out(n);
  if (n == 0) return out;
  double m = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i].to_double() * scale);
  std::vector<double> e(n);
  double sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = std::exp(x[i].to_double() * scale - m);
    sum += e[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = Half(e[i] / sum);
  return out;
}

std::vector<Half> vxe_layernorm(const std::vector<Half>& x, const Half* gamma, const Half* beta, std::size_t n) {
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += x[i].to_double();
  mean /= static_cast<double>(n);
  double var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i].to_double() - mean;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + kNormEps);
  std::vector<Half> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = Half((x[i].to_double() - mean) * inv * gamma[i].to_double() + beta[i].to_double());
  return out;
}

std::vector<Half> vxe_rmsnorm(const std::vector<Half>& x, const Half* gamma, std::size_t n) {
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += x[i].to_double() * x[i].to_double();
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + kNormEps);
  std::vector<Half> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Half(x[i].to_double() * inv * gamma[i].to_double());
  return out;
}

namespace {

template <typename F>
std::vector<Half> map1(const std::vector<Half>& x, std::size_t n, F&& f) {
  std::vector<Half> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Half(f(x[i].to_double()));
  return out;
}

}  // namespace

std::vector<Half> vxe_add(const std::vector<Half>& a, const std::vector<Half>& b, std::size_t n) {
  std::vector<Half> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Half(a[i].to_double() + b[i].to_double());
  return out;
}

std::vector<Half> vxe_mul(const std::vector<Half>& a, const std::vector<Half>& b, std::size_t n) {
  std::vector<Half> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = Half(a[i].to_double() * b[i].to_double());
  return out;
}

std::vector<Half> vxe_relu(const std::vector<Half>& x, std::size_t n) {
  return map1(x, n, [](double v) { return v > 0 ? v : 0.0; });
}

std::vector<Half> vxe_gelu(const std::vector<Half>& x, std::size_t n) {
  return map1(x, n, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
}

std::vector<Half> vxe_silu(const std::vector<Half>& x, std::size_t n) {
  return map1(x, n, [](double v) { return v / (1.0 + std::exp(-v)); });
}

std::vector<Half> vxe_rope(const std::vector<Half>& x, std::size_t n, int head_dim, int pos, double theta) {
  std::vector<Half> out(n);
  const auto hd = static_cast<std::size_t>(head_dim);
  for (std::size_t base = 0; base + hd <= n; base += hd)
    for (std::size_t i = 0; i + 1 < hd; i += 2) {
      const double freq = std::pow(theta, -static_cast<double>(i) / static_cast<double>(head_dim));
      const double ang = pos * freq;
      const double c = std::cos(ang), s = std::sin(ang);
      const double x0 = x[base + i].to_double(), x1 = x[base + i + 1].to_double();
      out[base + i] = Half(x0 * c - x1 * s);
      out[base + i + 1] = Half(x0 * s + x1 * c);
    }
  return out;
}

std::vector<Half> vxe_embed(const std::vector<Half>& tok, const std::vector<Half>* pos, std::size_t n) {
  if (pos == nullptr) return {tok.begin(), tok.begin() + static_cast<std::ptrdiff_t>(n)};
  return vxe_add(tok, *pos, n);
}

std::int64_t vxe_latency(std::int64_t n, int v, int fixed) { return (n + v - 1) / v + fixed; }

// --- sampler ------------------------------------------------------------------------

void validate_sampling(const SamplingParams& p) {
  if (p.top_k < 1) throw Error(ErrorKind::InvalidSamplingParams, "top_k must be >= 1");
  if (!(p.top_p > 0.0 && p.top_p <= 1.0)) throw Error(ErrorKind::InvalidSamplingParams, "top_p must be in (0, 1]");
  if (!(p.temperature >= 0.0)) throw Error(ErrorKind::InvalidSamplingParams, "temperature must be >= 0");
}

int argmax_token(const std::vector<Half>& logits, std::size_t n) {
  int best = 0;
  double bv = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = logits[i].to_double();
    if (v > bv) {  // strict: first (lowest id) maximum wins
      bv = v;
      best = static_cast<int>(i);
    }
  }
  return best;
}

std::vector<double> sampling_distribution(const std::vector<Half>& logits, std::size_t n, const SamplingParams& p) {
  validate_sampling(p);
  std::vector<double> prob(n, 0.0);
  if (n == 0) return prob;
  if (p.temperature == 0.0) {
    prob[static_cast<std::size_t>(argmax_token(logits, n))] = 1.0;
    return prob;
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)].to_double() > logits[static_cast<std::size_t>(b)].to_double();
  });
  const std::size_t k = std::min<std::size_t>(n, static_cast<std::size_t>(p.top_k));
  const double top = logits[static_cast<std::size_t>(order[0])].to_double() / p.temperature;
  std::vector<double> w(k);
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp(logits[static_cast<std::size_t>(order[i])].to_double() / p.temperature - top);
    sum += w[i];
  }
  std::size_t keep = k;
  if (p.top_p < 1.0) {
    double cum = 0;
    for (std::size_t i = 0; i < k; ++i) {
      cum += w[i] / sum;
      if (cum >= p.top_p) {
        keep = i + 1;
        break;
      }
    }
  }
  double kept = 0;
  for (std::size_t i = 0; i < keep; ++i) kept += w[i];
  for (std::size_t i = 0; i < keep; ++i) prob[static_cast<std::size_t>(order[i])] = w[i] / kept;
  return prob;
}

Sampler::Sampler(const SamplingParams& p) : params_(p), rng_(p.seed) { validate_sampling(p); }

int Sampler::sample(const std::vector<Half>& logits, std::size_t n) {
  if (params_.temperature == 0.0 || params_.top_k == 1) return argmax_token(logits, n);
  const auto prob = sampling_distribution(logits, n, params_);
  const double u = static_cast<double>(rng_() >> 11) * 0x1p-53;
  // walk survivors in descending-logit order so the draw is independent of id layout
  std::vector<int> order;
  for (std::size_t i = 0; i < n; ++i)
    if (prob[i] > 0) order.push_back(static_cast<int>(i));
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return logits[static_cast<std::size_t>(a)].to_double() > logits[static_cast<std::size_t>(b)].to_double();
  });
  double cum = 0;
  for (int id : order) {
    cum += prob[static_cast<std::size_t>(id)];
    if (u < cum) return id;
  }
  return order.back();
}

}  // namespace lpu
