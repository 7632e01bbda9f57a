#pragma once

// Brute-force retrieval oracle: enumerates ranks and histogram overlap
// directly from the definitions.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dualpath/retrieval.hpp"

namespace dualpath::testing {

inline double cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Rank of item `target` in a score list: 1 + items strictly ahead of it.
inline int brute_rank(const std::vector<double>& scores, int target) {
  int rank = 1;
  for (int j = 0; j < static_cast<int>(scores.size()); ++j) {
    const double s = scores[static_cast<std::size_t>(j)], t = scores[static_cast<std::size_t>(target)];
    if (s > t || (s == t && j < target)) ++rank;
  }
  return rank;
}

struct BruteReport {
  std::vector<int> i2t, t2i;
  std::vector<double> pos, neg;
};

// Scores come from similarity_matrix (checked separately against direct
// cosines) so exact ties are seen identically by both sides.
inline BruteReport brute_force(const FeatureBank& bank) {
  BruteReport r;
  const Eigen::MatrixXd scores = similarity_matrix(bank);
  const int g = static_cast<int>(bank.images.rows()), c = static_cast<int>(bank.texts.rows());
  std::vector<std::vector<double>> sim(static_cast<std::size_t>(g), std::vector<double>(static_cast<std::size_t>(c)));
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < c; ++j) {
      const double s = scores(i, j);
      sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s;
      (bank.caption_group[static_cast<std::size_t>(j)] == i ? r.pos : r.neg).push_back(s);
    }
  for (int i = 0; i < g; ++i) {
    int best = c + 1;
    for (int j = 0; j < c; ++j)
      if (bank.caption_group[static_cast<std::size_t>(j)] == i)
        best = std::min(best, brute_rank(sim[static_cast<std::size_t>(i)], j));
    r.i2t.push_back(best);
  }
  for (int j = 0; j < c; ++j) {
    std::vector<double> column;
    for (int i = 0; i < g; ++i) column.push_back(sim[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
    r.t2i.push_back(brute_rank(column, bank.caption_group[static_cast<std::size_t>(j)]));
  }
  return r;
}

inline double brute_overlap(const std::vector<double>& p, const std::vector<double>& q, int bins) {
  std::vector<double> hp(static_cast<std::size_t>(bins)), hq(static_cast<std::size_t>(bins));
  auto bin = [&](double v) { return std::clamp(static_cast<int>(std::floor((v + 1.0) / 2.0 * bins)), 0, bins - 1); };
  for (double v : p) hp[static_cast<std::size_t>(bin(v))] += 1.0 / static_cast<double>(p.size());
  for (double v : q) hq[static_cast<std::size_t>(bin(v))] += 1.0 / static_cast<double>(q.size());
  double s = 0;
  for (int b = 0; b < bins; ++b) s += std::min(hp[static_cast<std::size_t>(b)], hq[static_cast<std::size_t>(b)]);
  return s;
}

inline double recall(const std::vector<int>& ranks, int k) {
  return static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [&](int r) { return r <= k; })) /
         static_cast<double>(ranks.size());
}

inline int lower_median_of(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

inline FeatureBank random_bank(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> groups(2, 10), caps(1, 3), dim(2, 5), coarse(-2, 2);
  FeatureBank bank;
  const int g = groups(rng), d = dim(rng);
  bank.images.resize(g, d);
  std::vector<Eigen::RowVectorXd> texts;
  for (int i = 0; i < g; ++i) {
    bank.group_ids.push_back(100 + i);
    // Coarse integer features make exact score ties common.
    for (int k = 0; k < d; ++k) bank.images(i, k) = coarse(rng) + (k == 0 ? 0.5 : 0.0);
    const int n = caps(rng);
    for (int t = 0; t < n; ++t) {
      Eigen::RowVectorXd v(d);
      for (int k = 0; k < d; ++k) v(k) = coarse(rng) + (k == 1 ? 0.5 : 0.0);
      texts.push_back(v);
      bank.caption_group.push_back(i);
    }
  }
  bank.texts.resize(static_cast<Index>(texts.size()), d);
  for (std::size_t j = 0; j < texts.size(); ++j) bank.texts.row(static_cast<Index>(j)) = texts[j];
  return bank;
}

}  // namespace dualpath::testing
