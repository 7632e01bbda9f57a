#include "dualpath/nn.hpp"

#include <cmath>

namespace dualpath {

template <typename Scalar>
BatchNormState<Scalar>::BatchNormState(const std::string& name, Index channels, double momentum_, double epsilon_)
    : gamma(name + ".gamma", Tensor<Scalar>::constant({channels}, Scalar(1))),
      beta(name + ".beta", Tensor<Scalar>::zeros({channels})),
      running_mean(Tensor<Scalar>::Array::Zero(channels)),
      running_var(Tensor<Scalar>::Array::Ones(channels)),
      momentum(momentum_),
      epsilon(epsilon_) {
  if (!(momentum > 0.0 && momentum < 1.0)) throw ParameterError("batchnorm momentum must lie in (0,1)");
  if (!(epsilon > 0.0)) throw ParameterError("batchnorm epsilon must be positive");
}

template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& input, BatchNormState<Scalar>& state, Mode mode) {
  const Shape& xs = input.shape();
  if (xs.size() < 2 || xs[1] != state.channels()) {
    throw DimensionError("batchnorm: input " + to_string(xs) + " does not carry " + std::to_string(state.channels()) +
                         " channels on axis 1");
  }
  const Index n = xs[0], c = xs[1];
  const Index spatial = input.value().size() / (n * c);
  if (mode == Mode::train && n < 2) {
    throw BatchSizeError("batchnorm: train mode needs a batch of at least 2, got " + std::to_string(n));
  }
  const Index count = n * spatial;
  const Scalar* x = input.value().data();
  const auto& gamma = state.gamma.value.value().array();
  const auto& beta = state.beta.value.value().array();

  typename Tensor<Scalar>::Array mean(c), inv_std(c);
  if (mode == Mode::train) {
    mean.setZero();
    typename Tensor<Scalar>::Array var = Tensor<Scalar>::Array::Zero(c);
    for (Index i = 0; i < n; ++i)
      for (Index ch = 0; ch < c; ++ch)
        for (Index s = 0; s < spatial; ++s) mean[ch] += x[(i * c + ch) * spatial + s];
    mean /= static_cast<Scalar>(count);
    for (Index i = 0; i < n; ++i)
      for (Index ch = 0; ch < c; ++ch)
        for (Index s = 0; s < spatial; ++s) {
          const Scalar d = x[(i * c + ch) * spatial + s] - mean[ch];
          var[ch] += d * d;
        }
    var /= static_cast<Scalar>(count);
    inv_std = (var + static_cast<Scalar>(state.epsilon)).rsqrt();
    const Scalar m = static_cast<Scalar>(state.momentum);
    const Scalar unbias = static_cast<Scalar>(count) / static_cast<Scalar>(count - 1);
    state.running_mean = (Scalar(1) - m) * state.running_mean + m * mean;
    state.running_var = (Scalar(1) - m) * state.running_var + m * var * unbias;
  } else {
    mean = state.running_mean;
    inv_std = (state.running_var + static_cast<Scalar>(state.epsilon)).rsqrt();
  }

  Tensor<Scalar> normalized(xs);
  Tensor<Scalar> out(xs);
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch)
      for (Index s = 0; s < spatial; ++s) {
        const Index k = (i * c + ch) * spatial + s;
        normalized[k] = (x[k] - mean[ch]) * inv_std[ch];
        out[k] = gamma[ch] * normalized[k] + beta[ch];
      }

  const bool batch_stats = mode == Mode::train;
  return make_result<Scalar>(
      "batchnorm", std::move(out), {input.node(), state.gamma.value.node(), state.beta.value.node()},
      [normalized = std::move(normalized), inv_std, batch_stats, n, c, spatial](Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        auto& g_node = *self.inputs[1];
        auto& b_node = *self.inputs[2];
        const auto& gamma = g_node.value.array();
        const Scalar* g = self.grad.data();
        const Scalar* xhat = normalized.data();
        typename Tensor<Scalar>::Array sum_g = Tensor<Scalar>::Array::Zero(c);
        typename Tensor<Scalar>::Array sum_gx = Tensor<Scalar>::Array::Zero(c);
        for (Index i = 0; i < n; ++i)
          for (Index ch = 0; ch < c; ++ch)
            for (Index s = 0; s < spatial; ++s) {
              const Index k = (i * c + ch) * spatial + s;
              sum_g[ch] += g[k];
              sum_gx[ch] += g[k] * xhat[k];
            }
        g_node.accumulate(sum_gx);
        b_node.accumulate(sum_g);
        if (!in.requires_grad) return;
        typename Tensor<Scalar>::Array dx(in.value.size());
        const Scalar count = static_cast<Scalar>(n * spatial);
        for (Index i = 0; i < n; ++i)
          for (Index ch = 0; ch < c; ++ch)
            for (Index s = 0; s < spatial; ++s) {
              const Index k = (i * c + ch) * spatial + s;
              if (batch_stats) {
                dx[k] = gamma[ch] * inv_std[ch] * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count);
              } else {
                dx[k] = gamma[ch] * inv_std[ch] * g[k];
              }
            }
        in.accumulate(dx);
      });
}

template <typename Scalar>
void sgd_momentum_step(const std::vector<Parameter<Scalar>*>& params, double lr, double momentum) {
  for (const Parameter<Scalar>* p : params) {
    if (!p->frozen && !p->value.has_grad()) {
      throw StateError("sgd step: parameter '" + p->name + "' has no gradient");
    }
  }
  const Scalar rate = static_cast<Scalar>(lr);
  const Scalar mu = static_cast<Scalar>(momentum);
  for (Parameter<Scalar>* p : params) {
    if (p->frozen) continue;
    p->momentum.array() = mu * p->momentum.array() + p->value.grad().array();
    p->value.mutable_value().array() -= rate * p->momentum.array();
  }
}

template <typename Scalar>
void zero_grad(const std::vector<Parameter<Scalar>*>& params) {
  for (Parameter<Scalar>* p : params) p->value.zero_grad();
}

template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, Rng& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(normal(rng));
  return t;
}

#define DUALPATH_INSTANTIATE_NN(S)                                                            \
  template struct BatchNormState<S>;                                                         \
  template Var<S> batchnorm(const Var<S>&, BatchNormState<S>&, Mode);                        \
  template void sgd_momentum_step(const std::vector<Parameter<S>*>&, double, double);        \
  template void zero_grad(const std::vector<Parameter<S>*>&);                                \
  template Tensor<S> he_normal(Shape, Index, Rng&);

DUALPATH_INSTANTIATE_NN(float)
DUALPATH_INSTANTIATE_NN(double)

#undef DUALPATH_INSTANTIATE_NN

}  // namespace dualpath
