#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "dualpath/model.hpp"

namespace dualpath {

struct LossWeights {
  double lambda1 = 1.0;  // ranking
  double lambda2 = 1.0;  // visual instance
  double lambda3 = 1.0;  // textual instance

  static LossWeights stage1() { return {0.0, 1.0, 1.0}; }
  static LossWeights stage2() { return {1.0, 1.0, 1.0}; }
  void validate() const;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline constexpr double kNormEpsilon = 1e-12;

// Cosine of two plain vectors, clamped to [-1,1].
double cosine_similarity(std::span<const double> x, std::span<const double> y);

// Anchors (f_Ia, f_Ta) and their negatives (f_In, f_Tn), one row each.
template <typename Scalar>
struct QuadBatch {
  Var<Scalar> image_anchor;
  Var<Scalar> text_anchor;
  Var<Scalar> image_negative;
  Var<Scalar> text_negative;
  std::vector<int> anchor_classes;
  std::vector<int> negative_classes;
};

// Mean over rows of
//   max(0, a - (D(Ia,Ta) - D(Ia,Tn))) + max(0, a - (D(Ta,Ia) - D(Ta,In))).
template <typename Scalar>
Var<Scalar> ranking_loss(const QuadBatch<Scalar>& batch, double margin = 1.0);

template <typename Scalar>
struct InstanceLoss {
  Var<Scalar> visual;
  Var<Scalar> textual;
};

template <typename Scalar>
InstanceLoss<Scalar> instance_loss(const Var<Scalar>& image_features, const Var<Scalar>& text_features,
                                   std::span<const int> class_ids, const Parameter<Scalar>& classifier);

// l1 * rank + l2 * visual + l3 * textual. Terms with zero weight are left out
// of the graph; `rank` may be undefined when l1 is zero.
template <typename Scalar>
Var<Scalar> combined_loss(const Var<Scalar>& rank, const Var<Scalar>& visual, const Var<Scalar>& textual,
                          const LossWeights& weights);

double combined_loss(double rank, double visual, double textual, const LossWeights& weights);

enum class NegativeStrategy { random, hardest };

std::string_view strategy_name(NegativeStrategy strategy);
NegativeStrategy parse_strategy(std::string_view name);

// For each anchor, an index of another batch element with a different class.
// `similarity(i, j)` is consulted only by the hardest strategy.
std::vector<int> sample_negatives(std::span<const int> class_ids, NegativeStrategy strategy, Rng& rng,
                                  const std::function<double(int, int)>& similarity = {});

// Builds the quad batch for anchors f_img/f_text, choosing image and text
// negatives independently.
template <typename Scalar>
QuadBatch<Scalar> make_quad_batch(const Var<Scalar>& image_features, const Var<Scalar>& text_features,
                                  std::span<const int> class_ids, NegativeStrategy strategy, Rng& rng);

}  // namespace dualpath
