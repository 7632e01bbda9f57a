#pragma once

#include <string>
#include <vector>

#include "dualpath/ops.hpp"

namespace dualpath {

// Trainable tensor plus its SGD momentum buffer.
template <typename Scalar>
struct Parameter {
  std::string name;
  Var<Scalar> value;
  Tensor<Scalar> momentum;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string param_name, Tensor<Scalar> init)
      : name(std::move(param_name)), value(Var<Scalar>::leaf(init)), momentum(Tensor<Scalar>::zeros(init.shape())) {}

  // Copies get their own graph leaf.
  Parameter(const Parameter& other)
      : name(other.name),
        value(other.value.defined() ? Var<Scalar>::leaf(other.value.value(), other.value.requires_grad())
                                    : Var<Scalar>()),
        momentum(other.momentum),
        frozen(other.frozen) {}
  Parameter& operator=(const Parameter& other) {
    if (this != &other) *this = Parameter(other);
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  void set_frozen(bool flag) {
    frozen = flag;
    value.set_requires_grad(!flag);
  }
};

template <typename Scalar>
struct BatchNormState {
  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;
  typename Tensor<Scalar>::Array running_mean;
  typename Tensor<Scalar>::Array running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNormState() = default;
  BatchNormState(const std::string& name, Index channels, double momentum_ = 0.1, double epsilon_ = 1e-5);
  Index channels() const { return running_mean.size(); }
};

// Per-channel normalization over every axis except axis 1. Train mode uses
// batch statistics (biased variance) and folds them into the running
// averages (unbiased variance); eval mode uses the running averages.
template <typename Scalar>
Var<Scalar> batchnorm(const Var<Scalar>& input, BatchNormState<Scalar>& state, Mode mode);

// v <- momentum * v + grad; p <- p - lr * v. Frozen parameters are skipped.
template <typename Scalar>
void sgd_momentum_step(const std::vector<Parameter<Scalar>*>& params, double lr, double momentum);

template <typename Scalar>
void zero_grad(const std::vector<Parameter<Scalar>*>& params);

// Fan-in scaled normal initialization (He et al.) for convolution and
// fully-connected weights. `fan_in` is the number of inputs per output.
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, Rng& rng);

}  // namespace dualpath
