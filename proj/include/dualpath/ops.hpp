#pragma once

#include <random>
#include <span>
#include <vector>

#include "dualpath/autograd.hpp"

namespace dualpath {

using Rng = std::mt19937_64;

enum class Mode { train, eval };

struct Conv2dOptions {
  Index stride_h = 1;
  Index stride_w = 1;
  Index pad_top = 0;
  Index pad_bottom = 0;
  Index pad_left = 0;
  Index pad_right = 0;

  // Symmetric padding that keeps H and W for odd square kernels.
  static Conv2dOptions same(Index kernel, Index stride = 1) {
    Index p = kernel / 2;
    return {stride, stride, p, p, p, p};
  }
  // 1 x 2 filters along the length axis: zero left, one right.
  static Conv2dOptions length_pair(Index stride = 1) { return {1, stride, 0, 0, 0, 1}; }
};

enum class PoolKind { max, avg };

// Elementwise and reductions.
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);
template <typename Scalar> Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar offset);
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, Shape shape);

template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& x);

// [N,K] x [K,M] -> [N,M]
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);
// [N,Din] x [Din,Dout] + [Dout] -> [N,Dout]
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias);

// Cross-correlation. Accepts [C,H,W] or [N,C,H,W] input; kernel is [O,C,kh,kw].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Conv2dOptions& options = {});

// Non-overlapping windows over the trailing two axes of [C,H,W] or [N,C,H,W].
template <typename Scalar>
Var<Scalar> pool2d(const Var<Scalar>& input, Index window_h, Index window_w, PoolKind kind);

// Average over the trailing two axes: [N,C,H,W] -> [N,C].
template <typename Scalar> Var<Scalar> global_avg_pool(const Var<Scalar>& input);

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& input, double rate, Mode mode, Rng& rng);

// Mean over the batch of -log softmax(logits)[label].
template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels);

// Row-wise softmax of a plain matrix, used by diagnostics and tests.
template <typename Scalar> Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits);

// Selects rows of [N,D] -> [M,D]; gradients scatter-add back.
template <typename Scalar> Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const int> rows);

// Cosine similarity of aligned rows: [N,D] x [N,D] -> [N].
template <typename Scalar> Var<Scalar> row_cosine(const Var<Scalar>& a, const Var<Scalar>& b);

// Lookup of index sequences in a [d,E] table. `codes` is [N][L] with -1 for
// padding; output is [N,E,1,L] with zero columns at padded positions.
template <typename Scalar>
Var<Scalar> embedding_lookup(const std::vector<std::vector<int>>& codes, const Var<Scalar>& table);

}  // namespace dualpath
