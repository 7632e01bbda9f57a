#include "dualpath/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "dualpath/errors.hpp"

namespace dualpath {

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0)) {
    throw ParameterError("loss weights must be nonnegative, got (" + KeyValues::format_number(lambda1) + "," +
                         KeyValues::format_number(lambda2) + "," + KeyValues::format_number(lambda3) + ")");
  }
}

double cosine_similarity(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("cosine_similarity: lengths " + std::to_string(x.size()) + " and " +
                         std::to_string(y.size()) + " differ");
  }
  Eigen::Map<const Eigen::VectorXd> a(x.data(), static_cast<Index>(x.size()));
  Eigen::Map<const Eigen::VectorXd> b(y.data(), static_cast<Index>(y.size()));
  const double na = a.norm();
  const double nb = b.norm();
  if (na <= kNormEpsilon || nb <= kNormEpsilon) throw NumericError("cosine_similarity: near-zero norm");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

template <typename Scalar>
Var<Scalar> ranking_loss(const QuadBatch<Scalar>& batch, double margin) {
  const Var<Scalar> positive = row_cosine(batch.image_anchor, batch.text_anchor);
  const Var<Scalar> image_to_negative_text = row_cosine(batch.image_anchor, batch.text_negative);
  const Var<Scalar> text_to_negative_image = row_cosine(batch.text_anchor, batch.image_negative);
  const Scalar a = static_cast<Scalar>(margin);
  const Var<Scalar> first = relu(add_scalar(sub(image_to_negative_text, positive), a));
  const Var<Scalar> second = relu(add_scalar(sub(text_to_negative_image, positive), a));
  return mean(add(first, second));
}

template <typename Scalar>
InstanceLoss<Scalar> instance_loss(const Var<Scalar>& image_features, const Var<Scalar>& text_features,
                                   std::span<const int> class_ids, const Parameter<Scalar>& classifier) {
  return {softmax_cross_entropy(classify(image_features, classifier), class_ids),
          softmax_cross_entropy(classify(text_features, classifier), class_ids)};
}

template <typename Scalar>
Var<Scalar> combined_loss(const Var<Scalar>& rank, const Var<Scalar>& visual, const Var<Scalar>& textual,
                          const LossWeights& weights) {
  weights.validate();
  Var<Scalar> total;
  auto accumulate = [&](const Var<Scalar>& term, double w) {
    if (w == 0.0) return;
    if (!term.defined()) throw UsageError("combined_loss: term with nonzero weight is missing");
    Var<Scalar> scaled = scale(term, static_cast<Scalar>(w));
    total = total.defined() ? add(total, scaled) : scaled;
  };
  accumulate(rank, weights.lambda1);
  accumulate(visual, weights.lambda2);
  accumulate(textual, weights.lambda3);
  if (!total.defined()) total = Var<Scalar>::constant(Tensor<Scalar>({1}));
  return total;
}

double combined_loss(double rank, double visual, double textual, const LossWeights& weights) {
  weights.validate();
  return weights.lambda1 * rank + weights.lambda2 * visual + weights.lambda3 * textual;
}

std::string_view strategy_name(NegativeStrategy strategy) {
  return strategy == NegativeStrategy::random ? "random" : "hardest";
}

NegativeStrategy parse_strategy(std::string_view name) {
  if (name == "random") return NegativeStrategy::random;
  if (name == "hardest") return NegativeStrategy::hardest;
  throw ConfigError("unknown negative strategy '" + std::string(name) + "' (expected random or hardest)");
}

std::vector<int> sample_negatives(std::span<const int> class_ids, NegativeStrategy strategy, Rng& rng,
                                  const std::function<double(int, int)>& similarity) {
  const int n = static_cast<int>(class_ids.size());
  if (strategy == NegativeStrategy::hardest && !similarity) {
    throw UsageError("sample_negatives: hardest strategy needs a similarity function");
  }
  std::vector<int> out(n);
  std::vector<int> pool;
  for (int i = 0; i < n; ++i) {
    pool.clear();
    for (int j = 0; j < n; ++j) {
      if (class_ids[j] != class_ids[i]) pool.push_back(j);
    }
    if (pool.empty()) throw SamplingError("sample_negatives: batch holds a single class, no negative available");
    if (strategy == NegativeStrategy::random) {
      out[i] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    } else {
      int best = pool.front();
      double best_sim = similarity(i, best);
      for (int j : pool) {
        const double s = similarity(i, j);
        if (s > best_sim) {
          best = j;
          best_sim = s;
        }
      }
      out[i] = best;
    }
  }
  return out;
}

namespace {

template <typename Scalar>
Eigen::MatrixXd normalized_rows(const Tensor<Scalar>& x) {
  Eigen::MatrixXd m = x.matrix(x.dim(0)).template cast<double>();
  for (Index i = 0; i < m.rows(); ++i) {
    const double norm = m.row(i).norm();
    if (norm > kNormEpsilon) m.row(i) /= norm;
  }
  return m;
}

}  // namespace

template <typename Scalar>
QuadBatch<Scalar> make_quad_batch(const Var<Scalar>& image_features, const Var<Scalar>& text_features,
                                  std::span<const int> class_ids, NegativeStrategy strategy, Rng& rng) {
  std::vector<int> text_neg, image_neg;
  if (strategy == NegativeStrategy::hardest) {
    const Eigen::MatrixXd sim = normalized_rows(image_features.value()) * normalized_rows(text_features.value()).transpose();
    // image anchor i vs caption j, and caption anchor i vs image j
    text_neg = sample_negatives(class_ids, strategy, rng, [&](int i, int j) { return sim(i, j); });
    image_neg = sample_negatives(class_ids, strategy, rng, [&](int i, int j) { return sim(j, i); });
  } else {
    text_neg = sample_negatives(class_ids, strategy, rng);
    image_neg = sample_negatives(class_ids, strategy, rng);
  }
  QuadBatch<Scalar> q{image_features, text_features, gather_rows(image_features, std::span<const int>(image_neg)),
                      gather_rows(text_features, std::span<const int>(text_neg)),
                      std::vector<int>(class_ids.begin(), class_ids.end()), {}};
  q.negative_classes.reserve(class_ids.size());
  for (int j : text_neg) q.negative_classes.push_back(class_ids[j]);
  return q;
}

#define DUALPATH_INSTANTIATE_OBJECTIVES(S)                                                                     \
  template Var<S> ranking_loss(const QuadBatch<S>&, double);                                                  \
  template InstanceLoss<S> instance_loss(const Var<S>&, const Var<S>&, std::span<const int>, const Parameter<S>&); \
  template Var<S> combined_loss(const Var<S>&, const Var<S>&, const Var<S>&, const LossWeights&);             \
  template QuadBatch<S> make_quad_batch(const Var<S>&, const Var<S>&, std::span<const int>, NegativeStrategy, Rng&);

DUALPATH_INSTANTIATE_OBJECTIVES(float)
DUALPATH_INSTANTIATE_OBJECTIVES(double)

#undef DUALPATH_INSTANTIATE_OBJECTIVES

}  // namespace dualpath
