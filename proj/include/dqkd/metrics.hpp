#pragma once

#include "dqkd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace dqkd {

// Rank-based AUROC (Mann-Whitney with tie-averaged ranks):
// P(score+ > score-) + 0.5 * P(score+ == score-).
inline double auroc(const std::vector<float>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) fail("auroc: scores/labels size mismatch");
  const std::size_t n = scores.size();
  std::int64_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) fail("auroc: labels must be 0 or 1");
    n_pos += l;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(n) - n_pos;
  if (n_pos == 0 || n_neg == 0) fail("AUROC undefined: labels contain a single class");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // tie-averaged ranks, 1-based
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

}  // namespace dqkd
