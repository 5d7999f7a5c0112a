#pragma once

// Independent reference implementations backing the test suites. These stay
// deliberately naive (direct definitions, no shared code with the library
// beyond the per-bin scalar formulas the contracts pin down).

#include "dqkd/calib.hpp"
#include "dqkd/quantsim.hpp"
#include "dqkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace oracles {

// Six-nested-loop direct convolution in the working precision, kernel-major
// accumulation order (the library sums channel-major, so agreement is a real
// check, not an echo).
template <typename S>
dqkd::TensorT<S> naive_conv2d(const dqkd::TensorT<S>& in, const dqkd::TensorT<S>& w,
                              const dqkd::TensorT<S>* bias, int stride, int pad) {
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  dqkd::TensorT<S> out({O, OH, OW});
  for (int o = 0; o < O; ++o)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        S acc = bias ? (*bias)[o] : S(0);
        for (int kh = 0; kh < KH; ++kh)
          for (int kw = 0; kw < KW; ++kw)
            for (int c = 0; c < C; ++c) {
              const int ih = oh * stride - pad + kh;
              const int iw = ow * stride - pad + kw;
              if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
              acc += in(c, ih, iw) * w(o, c, kh, kw);
            }
        out(o, oh, ow) = acc;
      }
  return out;
}

// O(n^2) pairwise AUROC: P(s+ > s-) + 0.5 P(s+ == s-).
inline double pairwise_auroc(const std::vector<float>& scores, const std::vector<int>& labels) {
  double num = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

struct CalibChoice {
  double alpha, beta;
  double score;
};

// Exhaustive KL threshold search over all bin-edge windows of width >=
// min(2^bits, populated span), smaller-span tie-breaking. P is the window
// histogram with outliers folded into its edge bins; Q collapses the
// unfolded in-window counts into 2^bits levels and spreads each level over
// its fold-populated bins, with a 1e-9 floor. Shares the per-bin scalar
// formula with the implementation contract; enumeration is its own.
inline CalibChoice brute_entropy(const dqkd::RunningHistogram& h, int bits) {
  int plo = 0, phi = h.bins();
  while (h.counts[static_cast<std::size_t>(plo)] == 0) ++plo;
  while (h.counts[static_cast<std::size_t>(phi - 1)] == 0) --phi;
  const int levels = 1 << bits;
  const int minw = std::min(levels, phi - plo);
  const double eps = 1e-9;
  const double inv_n = 1.0 / static_cast<double>(h.total_count);

  double best = std::numeric_limits<double>::infinity();
  int bi = -1, bj = -1;
  for (int i = plo; i + minw <= phi; ++i) {
    for (int j = i + minw; j <= phi; ++j) {
      // folded reference over the window
      std::vector<double> p(static_cast<std::size_t>(j - i), 0.0);
      for (int k = plo; k < phi; ++k) {
        const auto c = h.counts[static_cast<std::size_t>(k)];
        const int idx = std::clamp(k, i, j - 1) - i;
        p[static_cast<std::size_t>(idx)] += static_cast<double>(c);
      }
      // collapse unfolded counts, spread over fold-populated bins
      std::vector<double> mass(static_cast<std::size_t>(levels), 0.0);
      std::vector<int> sup(static_cast<std::size_t>(levels), 0);
      for (int k = i; k < j; ++k) {
        const int l = static_cast<int>(static_cast<std::int64_t>(k - i) * levels / (j - i));
        mass[static_cast<std::size_t>(l)] +=
            static_cast<double>(h.counts[static_cast<std::size_t>(k)]);
        if (p[static_cast<std::size_t>(k - i)] > 0) sup[static_cast<std::size_t>(l)] += 1;
      }
      double kl = 0.0;
      for (int k = i; k < j; ++k) {
        if (p[static_cast<std::size_t>(k - i)] <= 0) continue;
        const int l = static_cast<int>(static_cast<std::int64_t>(k - i) * levels / (j - i));
        const double pk = p[static_cast<std::size_t>(k - i)] * inv_n + eps;
        const double qk =
            mass[static_cast<std::size_t>(l)] / sup[static_cast<std::size_t>(l)] * inv_n + eps;
        kl += pk * std::log(pk / qk);
      }
      const bool take = bi < 0 || kl < best ||
                        (kl == best && (j - i < bj - bi || (j - i == bj - bi && i < bi)));
      if (take) {
        best = kl;
        bi = i;
        bj = j;
      }
    }
  }
  double a = std::max(h.edge(bi), h.running_min);
  double b = std::min(h.edge(bj), h.running_max);
  if (!(a < b)) {
    a = h.running_min - 0.5;
    b = h.running_max + 0.5;
  }
  return {a, b, best};
}

// Exhaustive (min, max) pair search for the count-weighted squared
// quantization error of bin centers.
inline CalibChoice brute_l2(const dqkd::RunningHistogram& h, int bits) {
  int plo = 0, phi = h.bins();
  while (h.counts[static_cast<std::size_t>(plo)] == 0) ++plo;
  while (h.counts[static_cast<std::size_t>(phi - 1)] == 0) --phi;
  const double qmax = static_cast<double>((1 << bits) - 1);

  double best = std::numeric_limits<double>::infinity();
  int bi = -1, bj = -1;
  for (int i = plo; i < phi; ++i)
    for (int j = i + 1; j <= phi; ++j) {
      const double lo = h.edge(i), hi = h.edge(j);
      const double s = (hi - lo) / qmax;
      const double z = std::clamp(0.0 - dqkd::round_half_even(lo / s), 0.0, qmax);
      double err = 0.0;
      for (int k = plo; k < phi; ++k) {
        const auto c = h.counts[static_cast<std::size_t>(k)];
        if (!c) continue;
        const double x = h.center(k);
        const double q = std::clamp(dqkd::round_half_even(x / s + z), 0.0, qmax);
        const double xh = s * (q - z);
        err += static_cast<double>(c) * (x - xh) * (x - xh);
      }
      const bool take = bi < 0 || err < best ||
                        (err == best && (j - i < bj - bi || (j - i == bj - bi && i < bi)));
      if (take) {
        best = err;
        bi = i;
        bj = j;
      }
    }
  double a = std::max(h.edge(bi), h.running_min);
  double b = std::min(h.edge(bj), h.running_max);
  if (!(a < b)) {
    a = h.running_min - 0.5;
    b = h.running_max + 0.5;
  }
  return {a, b, best};
}

// Histogram fixture with direct field control (populated bins + exact edges).
inline dqkd::RunningHistogram make_hist(double lower, double bin_width,
                                        const std::vector<std::uint64_t>& counts) {
  dqkd::RunningHistogram h(static_cast<int>(counts.size()));
  h.lower = lower;
  h.bin_width = bin_width;
  h.counts = counts;
  h.total_count = 0;
  int first = -1, last = -1;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    h.total_count += counts[i];
    if (counts[i]) {
      if (first < 0) first = static_cast<int>(i);
      last = static_cast<int>(i);
    }
  }
  h.running_min = h.edge(first);
  h.running_max = h.edge(last + 1);
  return h;
}

}  // namespace oracles
