#include "dualpath/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualpath {

namespace {

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

template <typename Scalar>
void require_rank(const char* op, const Var<Scalar>& a, std::size_t rank) {
  if (a.shape().size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         to_string(a.shape()));
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("add", a, b);
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  return make_result<Scalar>("add", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad.array());
    self.inputs[1]->accumulate(self.grad.array());
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("sub", a, b);
  Tensor<Scalar> out(a.shape(), a.value().array() - b.value().array());
  return make_result<Scalar>("sub", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad.array());
    self.inputs[1]->accumulate(-self.grad.array());
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("mul", a, b);
  Tensor<Scalar> out(a.shape(), a.value().array() * b.value().array());
  return make_result<Scalar>("mul", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    lhs.accumulate(self.grad.array() * rhs.value.array());
    rhs.accumulate(self.grad.array() * lhs.value.array());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.value().array() * factor);
  return make_result<Scalar>("scale", std::move(out), {a.node()}, [factor](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad.array() * factor);
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar offset) {
  Tensor<Scalar> out(a.shape(), a.value().array() + offset);
  return make_result<Scalar>("add_scalar", std::move(out), {a.node()},
                             [](Node<Scalar>& self) { self.inputs[0]->accumulate(self.grad.array()); });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out({1}, {a.value().array().sum()});
  return make_result<Scalar>("sum", std::move(out), {a.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    in.accumulate(Tensor<Scalar>::Array::Constant(in.value.size(), self.grad[0]));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Scalar n = static_cast<Scalar>(a.value().size());
  Tensor<Scalar> out({1}, {a.value().array().sum() / n});
  return make_result<Scalar>("mean", std::move(out), {a.node()}, [n](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    in.accumulate(Tensor<Scalar>::Array::Constant(in.value.size(), self.grad[0] / n));
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return make_result<Scalar>("reshape", a.value().reshaped(std::move(shape)), {a.node()},
                             [](Node<Scalar>& self) { self.inputs[0]->accumulate(self.grad.array()); });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().array().max(Scalar(0)));
  return make_result<Scalar>("relu", std::move(out), {x.node()}, [](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    in.accumulate((in.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const Index n = a.dim(0), m = b.dim(1);
  Tensor<Scalar> out({n, m});
  out.matrix(n).noalias() = a.value().matrix(n) * b.value().matrix(b.dim(0));
  return make_result<Scalar>("matmul", std::move(out), {a.node(), b.node()}, [](Node<Scalar>& self) {
    auto& lhs = *self.inputs[0];
    auto& rhs = *self.inputs[1];
    const Index n = lhs.value.dim(0), k = lhs.value.dim(1);
    auto g = self.grad.matrix(n);
    if (lhs.requires_grad) {
      RowMatrix<Scalar> d = g * rhs.value.matrix(k).transpose();
      lhs.accumulate(Eigen::Map<const typename Tensor<Scalar>::Array>(d.data(), d.size()));
    }
    if (rhs.requires_grad) {
      RowMatrix<Scalar> d = lhs.value.matrix(n).transpose() * g;
      rhs.accumulate(Eigen::Map<const typename Tensor<Scalar>::Array>(d.data(), d.size()));
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& input, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require_rank("linear", input, 2);
  require_rank("linear", weight, 2);
  require_rank("linear", bias, 1);
  if (input.dim(1) != weight.dim(0) || bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: input " + to_string(input.shape()) + ", weight " + to_string(weight.shape()) +
                         ", bias " + to_string(bias.shape()) + " are incompatible");
  }
  const Index n = input.dim(0), dout = weight.dim(1);
  Tensor<Scalar> out({n, dout});
  auto y = out.matrix(n);
  y.noalias() = input.value().matrix(n) * weight.value().matrix(weight.dim(0));
  y.rowwise() += bias.value().array().matrix().transpose();
  return make_result<Scalar>(
      "linear", std::move(out), {input.node(), weight.node(), bias.node()}, [](Node<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& w = *self.inputs[1];
        auto& b = *self.inputs[2];
        const Index n = x.value.dim(0), din = w.value.dim(0);
        auto g = self.grad.matrix(n);
        if (x.requires_grad) {
          RowMatrix<Scalar> d = g * w.value.matrix(din).transpose();
          x.accumulate(Eigen::Map<const typename Tensor<Scalar>::Array>(d.data(), d.size()));
        }
        if (w.requires_grad) {
          RowMatrix<Scalar> d = x.value.matrix(n).transpose() * g;
          w.accumulate(Eigen::Map<const typename Tensor<Scalar>::Array>(d.data(), d.size()));
        }
        if (b.requires_grad) b.accumulate(g.colwise().sum().transpose().array());
      });
}

namespace {

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index out_h, out_w;
  Conv2dOptions options;

  Index rows() const { return channels * kernel_h * kernel_w; }
  Index plane() const { return out_h * out_w; }
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, RowMatrix<Scalar>& cols) {
  const Index plane = g.plane();
  cols.setZero(g.rows(), g.batch * plane);
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < g.channels; ++c) {
      const Scalar* src = x + (n * g.channels + c) * g.height * g.width;
      for (Index i = 0; i < g.kernel_h; ++i) {
        for (Index j = 0; j < g.kernel_w; ++j) {
          Scalar* dst = cols.row((c * g.kernel_h + i) * g.kernel_w + j).data() + n * plane;
          for (Index oh = 0; oh < g.out_h; ++oh) {
            const Index ih = oh * g.options.stride_h - g.options.pad_top + i;
            if (ih < 0 || ih >= g.height) continue;
            for (Index ow = 0; ow < g.out_w; ++ow) {
              const Index iw = ow * g.options.stride_w - g.options.pad_left + j;
              if (iw >= 0 && iw < g.width) dst[oh * g.out_w + ow] = src[ih * g.width + iw];
            }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar>& cols, const ConvGeometry& g, Scalar* dx) {
  const Index plane = g.plane();
  for (Index n = 0; n < g.batch; ++n) {
    for (Index c = 0; c < g.channels; ++c) {
      Scalar* dst = dx + (n * g.channels + c) * g.height * g.width;
      for (Index i = 0; i < g.kernel_h; ++i) {
        for (Index j = 0; j < g.kernel_w; ++j) {
          const Scalar* src = cols.row((c * g.kernel_h + i) * g.kernel_w + j).data() + n * plane;
          for (Index oh = 0; oh < g.out_h; ++oh) {
            const Index ih = oh * g.options.stride_h - g.options.pad_top + i;
            if (ih < 0 || ih >= g.height) continue;
            for (Index ow = 0; ow < g.out_w; ++ow) {
              const Index iw = ow * g.options.stride_w - g.options.pad_left + j;
              if (iw >= 0 && iw < g.width) dst[ih * g.width + iw] += src[oh * g.out_w + ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Conv2dOptions& options) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if ((xs.size() != 3 && xs.size() != 4) || ks.size() != 4 || xs[xs.size() - 3] != ks[1]) {
    throw DimensionError("conv2d: input " + to_string(xs) + " incompatible with kernel " + to_string(ks));
  }
  if (options.stride_h < 1 || options.stride_w < 1 || options.pad_top < 0 || options.pad_bottom < 0 ||
      options.pad_left < 0 || options.pad_right < 0) {
    throw ParameterError("conv2d: strides must be positive and paddings nonnegative");
  }
  const bool batched = xs.size() == 4;
  ConvGeometry g{};
  g.batch = batched ? xs[0] : 1;
  g.channels = xs[xs.size() - 3];
  g.height = xs[xs.size() - 2];
  g.width = xs[xs.size() - 1];
  g.out_channels = ks[0];
  g.kernel_h = ks[2];
  g.kernel_w = ks[3];
  g.options = options;
  const Index padded_h = g.height + options.pad_top + options.pad_bottom;
  const Index padded_w = g.width + options.pad_left + options.pad_right;
  if (g.kernel_h > padded_h || g.kernel_w > padded_w) {
    throw DimensionError("conv2d: kernel " + to_string(ks) + " exceeds padded input " + to_string(xs));
  }
  g.out_h = (padded_h - g.kernel_h) / options.stride_h + 1;
  g.out_w = (padded_w - g.kernel_w) / options.stride_w + 1;

  RowMatrix<Scalar> cols;
  im2col(input.value().data(), g, cols);
  RowMatrix<Scalar> result = kernel.value().matrix(g.out_channels) * cols;

  const Index plane = g.plane();
  Shape out_shape = batched ? Shape{g.batch, g.out_channels, g.out_h, g.out_w} : Shape{g.out_channels, g.out_h, g.out_w};
  Tensor<Scalar> out(std::move(out_shape));
  for (Index n = 0; n < g.batch; ++n) {
    for (Index o = 0; o < g.out_channels; ++o) {
      Eigen::Map<RowMatrix<Scalar>>(out.data() + (n * g.out_channels + o) * plane, 1, plane) =
          result.block(o, n * plane, 1, plane);
    }
  }

  return make_result<Scalar>(
      "conv2d", std::move(out), {input.node(), kernel.node()},
      [g, cols = std::move(cols)](Node<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& k = *self.inputs[1];
        const Index plane = g.plane();
        RowMatrix<Scalar> grad_out(g.out_channels, g.batch * plane);
        for (Index n = 0; n < g.batch; ++n) {
          for (Index o = 0; o < g.out_channels; ++o) {
            grad_out.block(o, n * plane, 1, plane) =
                Eigen::Map<const RowMatrix<Scalar>>(self.grad.data() + (n * g.out_channels + o) * plane, 1, plane);
          }
        }
        if (k.requires_grad) {
          RowMatrix<Scalar> dk = grad_out * cols.transpose();
          k.accumulate(Eigen::Map<const typename Tensor<Scalar>::Array>(dk.data(), dk.size()));
        }
        if (x.requires_grad) {
          RowMatrix<Scalar> dcols = k.value.matrix(g.out_channels).transpose() * grad_out;
          typename Tensor<Scalar>::Array dx = Tensor<Scalar>::Array::Zero(x.value.size());
          col2im(dcols, g, dx.data());
          x.accumulate(dx);
        }
      });
}

template <typename Scalar>
Var<Scalar> pool2d(const Var<Scalar>& input, Index window_h, Index window_w, PoolKind kind) {
  const Shape& xs = input.shape();
  if (xs.size() != 3 && xs.size() != 4) throw DimensionError("pool2d: expected [C,H,W] or [N,C,H,W], got " + to_string(xs));
  const Index h = xs[xs.size() - 2], w = xs[xs.size() - 1];
  if (window_h < 1 || window_w < 1 || h % window_h != 0 || w % window_w != 0) {
    throw DimensionError("pool2d: window " + std::to_string(window_h) + "x" + std::to_string(window_w) +
                         " does not divide input " + to_string(xs));
  }
  const Index planes = input.value().size() / (h * w);
  const Index oh = h / window_h, ow = w / window_w;
  Shape out_shape = xs;
  out_shape[xs.size() - 2] = oh;
  out_shape[xs.size() - 1] = ow;
  Tensor<Scalar> out(out_shape);
  std::vector<Index> argmax;
  if (kind == PoolKind::max) argmax.resize(static_cast<std::size_t>(out.size()));
  const Scalar* x = input.value().data();
  const Scalar inv = Scalar(1) / static_cast<Scalar>(window_h * window_w);
  for (Index p = 0; p < planes; ++p) {
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        const Index o = (p * oh + i) * ow + j;
        Scalar acc = kind == PoolKind::max ? -std::numeric_limits<Scalar>::infinity() : Scalar(0);
        Index best = 0;
        for (Index a = 0; a < window_h; ++a) {
          for (Index b = 0; b < window_w; ++b) {
            const Index flat = (p * h + i * window_h + a) * w + j * window_w + b;
            if (kind == PoolKind::max) {
              if (x[flat] > acc) {
                acc = x[flat];
                best = flat;
              }
            } else {
              acc += x[flat];
            }
          }
        }
        if (kind == PoolKind::max) {
          out[o] = acc;
          argmax[static_cast<std::size_t>(o)] = best;
        } else {
          out[o] = acc * inv;
        }
      }
    }
  }
  return make_result<Scalar>(
      "pool2d", std::move(out), {input.node()},
      [kind, argmax = std::move(argmax), h, w, window_h, window_w, inv](Node<Scalar>& self) {
        auto& in = *self.inputs[0];
        typename Tensor<Scalar>::Array dx = Tensor<Scalar>::Array::Zero(in.value.size());
        const Index oh = h / window_h, ow = w / window_w;
        const Index planes = in.value.size() / (h * w);
        for (Index p = 0; p < planes; ++p) {
          for (Index i = 0; i < oh; ++i) {
            for (Index j = 0; j < ow; ++j) {
              const Index o = (p * oh + i) * ow + j;
              const Scalar g = self.grad[o];
              if (kind == PoolKind::max) {
                dx[argmax[static_cast<std::size_t>(o)]] += g;
              } else {
                for (Index a = 0; a < window_h; ++a)
                  for (Index b = 0; b < window_w; ++b) dx[(p * h + i * window_h + a) * w + j * window_w + b] += g * inv;
              }
            }
          }
        }
        in.accumulate(dx);
      });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& input) {
  require_rank("global_avg_pool", input, 4);
  const Shape& xs = input.shape();
  return reshape(pool2d(input, xs[2], xs[3], PoolKind::avg), Shape{xs[0], xs[1]});
}

template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& input, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return input;
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar factor = static_cast<Scalar>(1.0 / (1.0 - rate));
  typename Tensor<Scalar>::Array mask(input.value().size());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = keep(rng) ? factor : Scalar(0);
  Tensor<Scalar> out(input.shape(), input.value().array() * mask);
  return make_result<Scalar>("dropout", std::move(out), {input.node()}, [mask = std::move(mask)](Node<Scalar>& self) {
    self.inputs[0]->accumulate(self.grad.array() * mask);
  });
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected [N,K], got " + to_string(logits.shape()));
  Tensor<Scalar> out = logits;
  auto m = out.matrix(logits.dim(0));
  for (Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r) = m.row(r).array().exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Var<Scalar> softmax_cross_entropy(const Var<Scalar>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const Index n = logits.dim(0), k = logits.dim(1);
  if (static_cast<Index>(labels.size()) != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || label >= k) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
  }
  Tensor<Scalar> probs = softmax_rows(logits.value());
  auto z = logits.value().matrix(n);
  Scalar loss = 0;
  for (Index r = 0; r < n; ++r) {
    const Scalar top = z.row(r).maxCoeff();
    const Scalar log_norm = top + std::log((z.row(r).array() - top).exp().sum());
    loss += log_norm - z(r, labels[static_cast<std::size_t>(r)]);
  }
  loss /= static_cast<Scalar>(n);
  std::vector<int> targets(labels.begin(), labels.end());
  return make_result<Scalar>(
      "softmax_cross_entropy", Tensor<Scalar>({1}, {loss}), {logits.node()},
      [probs = std::move(probs), targets = std::move(targets)](Node<Scalar>& self) {
        const Index n = probs.dim(0);
        Tensor<Scalar> d = probs;
        auto m = d.matrix(n);
        for (Index r = 0; r < n; ++r) m(r, targets[static_cast<std::size_t>(r)]) -= Scalar(1);
        self.inputs[0]->accumulate(d.array() * (self.grad[0] / static_cast<Scalar>(n)));
      });
}

template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::span<const int> rows) {
  require_rank("gather_rows", x, 2);
  const Index n = x.dim(0), d = x.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty row selection");
  for (int r : rows) {
    if (r < 0 || r >= n) throw IndexError("gather_rows: row " + std::to_string(r) + " outside [0," + std::to_string(n) + ")");
  }
  const Index m = static_cast<Index>(rows.size());
  Tensor<Scalar> out({m, d});
  auto src = x.value().matrix(n);
  auto dst = out.matrix(m);
  for (Index i = 0; i < m; ++i) dst.row(i) = src.row(rows[static_cast<std::size_t>(i)]);
  std::vector<int> picked(rows.begin(), rows.end());
  return make_result<Scalar>("gather_rows", std::move(out), {x.node()}, [picked = std::move(picked)](Node<Scalar>& self) {
    auto& in = *self.inputs[0];
    const Index n = in.value.dim(0);
    Tensor<Scalar> dx(in.value.shape());
    auto g = self.grad.matrix(static_cast<Index>(picked.size()));
    auto dm = dx.matrix(n);
    for (std::size_t i = 0; i < picked.size(); ++i) dm.row(picked[i]) += g.row(static_cast<Index>(i));
    in.accumulate(dx.array());
  });
}

template <typename Scalar>
Var<Scalar> row_cosine(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_rank("row_cosine", a, 2);
  require_same_shape("row_cosine", a, b);
  const Index n = a.dim(0);
  auto am = a.value().matrix(n);
  auto bm = b.value().matrix(n);
  typename Tensor<Scalar>::Array na(n), nb(n), cosine(n);
  for (Index r = 0; r < n; ++r) {
    na[r] = am.row(r).norm();
    nb[r] = bm.row(r).norm();
    if (!(na[r] > Scalar(1e-12)) || !(nb[r] > Scalar(1e-12))) {
      throw NumericError("row_cosine: near-zero norm in row " + std::to_string(r));
    }
    cosine[r] = std::clamp(am.row(r).dot(bm.row(r)) / (na[r] * nb[r]), Scalar(-1), Scalar(1));
  }
  Tensor<Scalar> out({n}, cosine);
  return make_result<Scalar>(
      "row_cosine", std::move(out), {a.node(), b.node()},
      [na = std::move(na), nb = std::move(nb), cosine = std::move(cosine)](Node<Scalar>& self) {
        auto& an = *self.inputs[0];
        auto& bn = *self.inputs[1];
        const Index n = an.value.dim(0);
        auto am = an.value.matrix(n);
        auto bm = bn.value.matrix(n);
        if (an.requires_grad) {
          Tensor<Scalar> d(an.value.shape());
          auto dm = d.matrix(n);
          for (Index r = 0; r < n; ++r) {
            dm.row(r) = self.grad[r] * (bm.row(r) / (na[r] * nb[r]) - cosine[r] * am.row(r) / (na[r] * na[r]));
          }
          an.accumulate(d.array());
        }
        if (bn.requires_grad) {
          Tensor<Scalar> d(bn.value.shape());
          auto dm = d.matrix(n);
          for (Index r = 0; r < n; ++r) {
            dm.row(r) = self.grad[r] * (am.row(r) / (na[r] * nb[r]) - cosine[r] * bm.row(r) / (nb[r] * nb[r]));
          }
          bn.accumulate(d.array());
        }
      });
}

template <typename Scalar>
Var<Scalar> embedding_lookup(const std::vector<std::vector<int>>& codes, const Var<Scalar>& table) {
  require_rank("embedding_lookup", table, 2);
  if (codes.empty()) throw DimensionError("embedding_lookup: empty batch");
  const Index n = static_cast<Index>(codes.size());
  const Index len = static_cast<Index>(codes.front().size());
  const Index vocab = table.dim(0), width = table.dim(1);
  if (len == 0) throw DimensionError("embedding_lookup: zero-length codes");
  for (const auto& row : codes) {
    if (static_cast<Index>(row.size()) != len) throw DimensionError("embedding_lookup: ragged code lengths");
    for (int idx : row) {
      if (idx < -1 || idx >= vocab) {
        throw IndexError("embedding_lookup: word index " + std::to_string(idx) + " outside [0," + std::to_string(vocab) + ")");
      }
    }
  }
  Tensor<Scalar> out({n, width, 1, len});
  auto t = table.value().matrix(vocab);
  for (Index s = 0; s < n; ++s) {
    for (Index l = 0; l < len; ++l) {
      const int idx = codes[static_cast<std::size_t>(s)][static_cast<std::size_t>(l)];
      if (idx < 0) continue;
      for (Index e = 0; e < width; ++e) out[(s * width + e) * len + l] = t(idx, e);
    }
  }
  return make_result<Scalar>("embedding_lookup", std::move(out), {table.node()}, [codes](Node<Scalar>& self) {
    auto& tab = *self.inputs[0];
    const Index vocab = tab.value.dim(0), width = tab.value.dim(1);
    const Index len = static_cast<Index>(codes.front().size());
    Tensor<Scalar> d(tab.value.shape());
    auto dm = d.matrix(vocab);
    for (std::size_t s = 0; s < codes.size(); ++s) {
      for (Index l = 0; l < len; ++l) {
        const int idx = codes[s][static_cast<std::size_t>(l)];
        if (idx < 0) continue;
        for (Index e = 0; e < width; ++e) dm(idx, e) += self.grad[(static_cast<Index>(s) * width + e) * len + l];
      }
    }
    tab.accumulate(d.array());
  });
}

#define DUALPATH_INSTANTIATE_OPS(S)                                                                   \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> scale(const Var<S>&, S);                                                           \
  template Var<S> add_scalar(const Var<S>&, S);                                                      \
  template Var<S> sum(const Var<S>&);                                                                \
  template Var<S> mean(const Var<S>&);                                                               \
  template Var<S> reshape(const Var<S>&, Shape);                                                     \
  template Var<S> relu(const Var<S>&);                                                               \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                              \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                               \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Conv2dOptions&);                        \
  template Var<S> pool2d(const Var<S>&, Index, Index, PoolKind);                                     \
  template Var<S> global_avg_pool(const Var<S>&);                                                    \
  template Var<S> dropout(const Var<S>&, double, Mode, Rng&);                                        \
  template Var<S> softmax_cross_entropy(const Var<S>&, std::span<const int>);                        \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                                 \
  template Var<S> gather_rows(const Var<S>&, std::span<const int>);                                  \
  template Var<S> row_cosine(const Var<S>&, const Var<S>&);                                          \
  template Var<S> embedding_lookup(const std::vector<std::vector<int>>&, const Var<S>&);

DUALPATH_INSTANTIATE_OPS(float)
DUALPATH_INSTANTIATE_OPS(double)

#undef DUALPATH_INSTANTIATE_OPS

}  // namespace dualpath
