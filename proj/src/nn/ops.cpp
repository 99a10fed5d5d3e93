// SPDX-License-Identifier: Apache-2.0
#include "bdkit/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "bdkit/core/error.hpp"

namespace bdkit::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw GeometryError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                        to_string(b.shape()));
  }
}

void require_rank(const Var& a, std::size_t r, const char* op) {
  if (a.value().rank() != r) {
    throw GeometryError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                        to_string(a.shape()));
  }
}

// Gradient buffer of input i, or nullptr when that input is a constant.
double* in_grad(Node& n, std::size_t i) {
  auto& in = n.inputs[i];
  return in->requires_grad ? in->grad_buffer().data() : nullptr;
}

template <class Fwd, class Bwd>
Var unary(const Var& a, Fwd fwd, Bwd dfdx) {
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return Var::make(std::move(out), {a}, [dfdx](Node& n) {
    double* gx = in_grad(n, 0);
    if (!gx) return;
    const double* x = n.inputs[0]->value.data();
    const double* y = n.value.data();
    const double* gy = n.grad.data();
    for (std::size_t i = 0; i < n.value.size(); ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
  });
}

double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = in_grad(n, k)) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    if (double* g = in_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (double* g = in_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var::make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (double* g = in_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (double* g = in_grad(n, 1)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs_pow(const Var& a, double p) {
  return unary(
      a, [p](double x) { return std::pow(std::abs(x), p); },
      [p](double x, double) { return x == 0.0 ? 0.0 : p * std::pow(std::abs(x), p - 1.0) * sign(x); });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var sqrt_guarded(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; },
      [](double x, double y) { return x > 0.0 ? 0.5 / y : 0.0; });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return Var::make(std::move(out), {a}, [](Node& n) {
    if (double* g = in_grad(n, 0)) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var flatten(const Var& a) {
  const std::size_t b = a.dim(0);
  return reshape(a, {b, a.value().size() / b});
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return Var::make(Tensor::scalar(s), {a}, [](Node& n) {
    if (double* g = in_grad(n, 0)) {
      const double gy = n.grad[0];
      for (std::size_t i = 0; i < n.inputs[0]->value.size(); ++i) g[i] += gy;
    }
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var row_sum(const Var& a) {
  require_rank(a, 2, "row_sum");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a.value()[r * cols + c];
    out[r] = s;
  }
  return Var::make(std::move(out), {a}, [rows, cols](Node& n) {
    if (double* g = in_grad(n, 0)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += n.grad[r];
    }
  });
}

Var add_all(const std::vector<Var>& terms) {
  if (terms.empty()) return Var(Tensor::scalar(0.0));
  double s = 0.0;
  for (const auto& t : terms) s += t.value().item();
  return Var::make(Tensor::scalar(s), terms, [](Node& n) {
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      if (double* g = in_grad(n, k)) g[0] += n.grad[0];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  if (b.dim(0) != k) throw GeometryError("matmul: inner dimensions differ");
  Tensor out({m, nn});
  MapMat(out.data(), m, nn).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, nn);
  return Var::make(std::move(out), {a, b}, [m, k, nn](Node& n) {
    CMapMat gy(n.grad.data(), m, nn);
    if (double* g = in_grad(n, 0)) {
      MapMat(g, m, k).noalias() += gy * CMapMat(n.inputs[1]->value.data(), k, nn).transpose();
    }
    if (double* g = in_grad(n, 1)) {
      MapMat(g, k, nn).noalias() += CMapMat(n.inputs[0]->value.data(), m, k).transpose() * gy;
    }
  });
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  MapMat(out.data(), c, r) = CMapMat(a.value().data(), r, c).transpose();
  return Var::make(std::move(out), {a}, [r, c](Node& n) {
    if (double* g = in_grad(n, 0)) MapMat(g, r, c) += CMapMat(n.grad.data(), c, r).transpose();
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const std::size_t b = x.dim(0), d = x.dim(1), o = weight.dim(0);
  if (weight.dim(1) != d) {
    throw GeometryError("linear: input width " + std::to_string(d) + " vs weight " + to_string(weight.shape()));
  }
  Tensor out({b, o});
  MapMat y(out.data(), b, o);
  y.noalias() = CMapMat(x.value().data(), b, d) * CMapMat(weight.value().data(), o, d).transpose();
  const bool has_bias = bias.defined();
  if (has_bias) {
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < o; ++j) out[i * o + j] += bias.value()[j];
  }
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Var::make(std::move(out), std::move(inputs), [b, d, o, has_bias](Node& n) {
    CMapMat gy(n.grad.data(), b, o);
    if (double* g = in_grad(n, 0)) {
      MapMat(g, b, d).noalias() += gy * CMapMat(n.inputs[1]->value.data(), o, d);
    }
    if (double* g = in_grad(n, 1)) {
      MapMat(g, o, d).noalias() += gy.transpose() * CMapMat(n.inputs[0]->value.data(), b, d);
    }
    if (has_bias) {
      if (double* g = in_grad(n, 2)) {
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < o; ++j) g[j] += n.grad[i * o + j];
      }
    }
  });
}

Var concat_rows(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_rows");
  require_rank(b, 2, "concat_rows");
  if (a.dim(1) != b.dim(1)) throw GeometryError("concat_rows: column mismatch");
  const std::size_t na = a.value().size();
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
  std::copy(a.value().storage().begin(), a.value().storage().end(), out.storage().begin());
  std::copy(b.value().storage().begin(), b.value().storage().end(), out.storage().begin() + na);
  return Var::make(std::move(out), {a, b}, [na](Node& n) {
    if (double* g = in_grad(n, 0)) {
      for (std::size_t i = 0; i < na; ++i) g[i] += n.grad[i];
    }
    if (double* g = in_grad(n, 1)) {
      for (std::size_t i = na; i < n.grad.size(); ++i) g[i - na] += n.grad[i];
    }
  });
}

Var select_rows(const Var& a, const std::vector<std::size_t>& rows) {
  const std::size_t stride = a.value().size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= a.dim(0)) throw GeometryError("select_rows: index out of range");
    std::copy_n(a.value().data() + rows[r] * stride, stride, out.data() + r * stride);
  }
  return Var::make(std::move(out), {a}, [rows, stride](Node& n) {
    if (double* g = in_grad(n, 0)) {
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < stride; ++j) g[rows[r] * stride + j] += n.grad[r * stride + j];
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x.value()[r * cols + c] * x.value()[r * cols + c];
    norms[r] = std::sqrt(s);
    const double inv = norms[r] < kNormEpsilon ? 1.0 : 1.0 / norms[r];
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.value()[r * cols + c] * inv;
  }
  return Var::make(std::move(out), {x}, [rows, cols, norms](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * cols;
      const double* gy = n.grad.data() + r * cols;
      if (norms[r] < kNormEpsilon) {
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gy[c];
        continue;
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += (gy[c] - y[c] * dot) / norms[r];
    }
  });
}

Var row_norm(const Var& x) {
  require_rank(x, 2, "row_norm");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x.value()[r * cols + c] * x.value()[r * cols + c];
    out[r] = std::sqrt(s);
  }
  return Var::make(std::move(out), {x}, [rows, cols](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    const Tensor& xv = n.inputs[0]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      if (n.value[r] < kNormEpsilon) continue;
      const double k = n.grad[r] / n.value[r];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += k * xv[r * cols + c];
    }
  });
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.value().data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return Var::make(std::move(out), {x}, [rows, cols](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * cols;
      const double* gy = n.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.value().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  return Var::make(std::move(out), {x}, [rows, cols](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * cols;
      const double* gy = n.grad.data() + r * cols;
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += gy[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gy[c] - std::exp(y[c]) * s;
    }
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw GeometryError("cross_entropy: label count mismatch");
  Var lsm = log_softmax_rows(logits);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) throw GeometryError("cross_entropy: label out of range");
    loss -= lsm.value()[r * cols + static_cast<std::size_t>(y)];
  }
  loss /= static_cast<double>(rows);
  return Var::make(Tensor::scalar(loss), {lsm}, [labels, rows, cols](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    const double k = n.grad[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) g[r * cols + static_cast<std::size_t>(labels[r])] -= k;
  });
}

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t col_rows() const { return cin * k * k; }
  std::size_t col_cols() const { return ho * wo; }
};

void im2col(const double* img, const ConvGeom& g, double* col) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] =
                inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeom& g, double* img) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((c * g.k + ki) * g.k + kj) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  ConvGeom g{};
  g.batch = x.dim(0);
  g.cin = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (weight.dim(1) != g.cin || weight.dim(3) != g.k) {
    throw GeometryError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                        to_string(x.shape()));
  }
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) throw GeometryError("conv2d: kernel larger than padded input");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;

  Tensor out({g.batch, g.cout, g.ho, g.wo});
  std::vector<double> col(g.col_rows() * g.col_cols());
  CMapMat wm(weight.value().data(), g.cout, g.col_rows());
  const std::size_t in_stride = g.cin * g.h * g.w;
  const std::size_t out_stride = g.cout * g.ho * g.wo;
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(x.value().data() + b * in_stride, g, col.data());
    MapMat(out.data() + b * out_stride, g.cout, g.col_cols()).noalias() =
        wm * CMapMat(col.data(), g.col_rows(), g.col_cols());
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    const std::size_t hw = g.ho * g.wo;
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t o = 0; o < g.cout; ++o) {
        double* p = out.data() + b * out_stride + o * hw;
        const double bv = bias.value()[o];
        for (std::size_t i = 0; i < hw; ++i) p[i] += bv;
      }
  }
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return Var::make(std::move(out), std::move(inputs), [g, has_bias](Node& n) {
    double* gx = in_grad(n, 0);
    double* gw = in_grad(n, 1);
    const std::size_t in_stride = g.cin * g.h * g.w;
    const std::size_t out_stride = g.cout * g.ho * g.wo;
    std::vector<double> col(g.col_rows() * g.col_cols());
    std::vector<double> dcol(gx ? col.size() : 0);
    CMapMat wm(n.inputs[1]->value.data(), g.cout, g.col_rows());
    for (std::size_t b = 0; b < g.batch; ++b) {
      CMapMat gy(n.grad.data() + b * out_stride, g.cout, g.col_cols());
      if (gw) {
        im2col(n.inputs[0]->value.data() + b * in_stride, g, col.data());
        MapMat(gw, g.cout, g.col_rows()).noalias() += gy * CMapMat(col.data(), g.col_rows(), g.col_cols()).transpose();
      }
      if (gx) {
        MapMat(dcol.data(), g.col_rows(), g.col_cols()).noalias() = wm.transpose() * gy;
        col2im_add(dcol.data(), g, gx + b * in_stride);
      }
    }
    if (has_bias) {
      if (double* gb = in_grad(n, 2)) {
        const std::size_t hw = g.ho * g.wo;
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t o = 0; o < g.cout; ++o) {
            const double* p = n.grad.data() + b * out_stride + o * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += p[i];
            gb[o] += s;
          }
      }
    }
  });
}

Var avg_pool2d(const Var& x, std::size_t k) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % k || w % k) throw GeometryError("avg_pool2d: spatial size not divisible by window");
  const std::size_t ho = h / k, wo = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor out({b, c, ho, wo});
  const double* in = x.value().data();
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j) s += in[(p * h + oy * k + i) * w + ox * k + j];
        out[(p * ho + oy) * wo + ox] = s * inv;
      }
  return Var::make(std::move(out), {x}, [b, c, h, w, k, ho, wo, inv](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < b * c; ++p)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double gy = n.grad[(p * ho + oy) * wo + ox] * inv;
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) g[(p * h + oy * k + i) * w + ox * k + j] += gy;
        }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, c});
  for (std::size_t p = 0; p < b * c; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += x.value()[p * hw + i];
    out[p] = s / static_cast<double>(hw);
  }
  return Var::make(std::move(out), {x}, [b, c, hw](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    for (std::size_t p = 0; p < b * c; ++p) {
      const double gy = n.grad[p] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += gy;
    }
  });
}

Var channel_scale(const Var& x, const Var& s) {
  if (x.value().rank() < 2) throw GeometryError("channel_scale: input needs a channel axis");
  const std::size_t b = x.dim(0), c = x.dim(1), inner = x.value().size() / (b * c);
  if (s.value().size() != c) throw GeometryError("channel_scale: scale length differs from channel count");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double sv = s.value()[j];
      const std::size_t off = (i * c + j) * inner;
      for (std::size_t t = 0; t < inner; ++t) out[off + t] = x.value()[off + t] * sv;
    }
  return Var::make(std::move(out), {x, s}, [b, c, inner](Node& n) {
    double* gx = in_grad(n, 0);
    double* gs = in_grad(n, 1);
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& sv = n.inputs[1]->value;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t off = (i * c + j) * inner;
        double acc = 0.0;
        for (std::size_t t = 0; t < inner; ++t) {
          if (gx) gx[off + t] += n.grad[off + t] * sv[j];
          acc += n.grad[off + t] * xv[off + t];
        }
        if (gs) gs[j] += acc;
      }
  });
}

Var channel_abs_pow_sum(const Var& x, double p) {
  require_rank(x, 4, "channel_abs_pow_sum");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({b, x.dim(2), x.dim(3)});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < hw; ++t) out[i * hw + t] += std::pow(std::abs(x.value()[(i * c + j) * hw + t]), p);
  return Var::make(std::move(out), {x}, [b, c, hw, p](Node& n) {
    double* g = in_grad(n, 0);
    if (!g) return;
    const Tensor& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t t = 0; t < hw; ++t) {
          const double v = xv[(i * c + j) * hw + t];
          if (v == 0.0) continue;
          g[(i * c + j) * hw + t] += n.grad[i * hw + t] * p * std::pow(std::abs(v), p - 1.0) * sign(v);
        }
  });
}

Var blend(const Var& x, const Var& mask, const Var& pattern) {
  require_rank(x, 4, "blend");
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (mask.value().size() != hw || pattern.value().size() != c * hw) {
    throw GeometryError("blend: mask/pattern do not match image geometry " + to_string(x.shape()));
  }
  Tensor out(x.shape());
  const double* m = mask.value().data();
  const double* pt = pattern.value().data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < hw; ++t) {
        const std::size_t idx = (i * c + j) * hw + t;
        out[idx] = (1.0 - m[t]) * x.value()[idx] + m[t] * pt[j * hw + t];
      }
  return Var::make(std::move(out), {x, mask, pattern}, [b, c, hw](Node& n) {
    double* gx = in_grad(n, 0);
    double* gm = in_grad(n, 1);
    double* gp = in_grad(n, 2);
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& mv = n.inputs[1]->value;
    const Tensor& pv = n.inputs[2]->value;
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t t = 0; t < hw; ++t) {
          const std::size_t idx = (i * c + j) * hw + t;
          const double gy = n.grad[idx];
          if (gx) gx[idx] += gy * (1.0 - mv[t]);
          if (gm) gm[t] += gy * (pv[j * hw + t] - xv[idx]);
          if (gp) gp[j * hw + t] += gy * mv[t];
        }
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                 const Tensor& running_var, bool training, BatchNormBuffers update) {
  require_rank(x, 4, "batch_norm2d");
  constexpr double eps = 1e-5;
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(b * hw);
  std::vector<double> mu(c), inv_std(c);
  const Tensor& xv = x.value();
  for (std::size_t j = 0; j < c; ++j) {
    if (training) {
      double s = 0.0, ss = 0.0;
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < hw; ++t) s += xv[(i * c + j) * hw + t];
      mu[j] = s / m;
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t t = 0; t < hw; ++t) {
          const double d = xv[(i * c + j) * hw + t] - mu[j];
          ss += d * d;
        }
      const double var = ss / m;
      inv_std[j] = 1.0 / std::sqrt(var + eps);
      if (update.running_mean && update.running_var) {
        const double unbiased = m > 1.0 ? ss / (m - 1.0) : var;
        (*update.running_mean)[j] = (1.0 - update.momentum) * (*update.running_mean)[j] + update.momentum * mu[j];
        (*update.running_var)[j] = (1.0 - update.momentum) * (*update.running_var)[j] + update.momentum * unbiased;
      }
    } else {
      mu[j] = running_mean[j];
      inv_std[j] = 1.0 / std::sqrt(running_var[j] + eps);
    }
  }
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < hw; ++t) {
        const std::size_t idx = (i * c + j) * hw + t;
        xhat[idx] = (xv[idx] - mu[j]) * inv_std[j];
        out[idx] = gamma.value()[j] * xhat[idx] + beta.value()[j];
      }
  return Var::make(std::move(out), {x, gamma, beta},
                   [b, c, hw, m, inv_std, training, xhat = std::move(xhat)](Node& n) {
                     double* gx = in_grad(n, 0);
                     double* gg = in_grad(n, 1);
                     double* gb = in_grad(n, 2);
                     const Tensor& gam = n.inputs[1]->value;
                     for (std::size_t j = 0; j < c; ++j) {
                       double sum_dy = 0.0, sum_dy_xhat = 0.0;
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t t = 0; t < hw; ++t) {
                           const std::size_t idx = (i * c + j) * hw + t;
                           sum_dy += n.grad[idx];
                           sum_dy_xhat += n.grad[idx] * xhat[idx];
                         }
                       if (gg) gg[j] += sum_dy_xhat;
                       if (gb) gb[j] += sum_dy;
                       if (!gx) continue;
                       const double k = gam[j] * inv_std[j];
                       for (std::size_t i = 0; i < b; ++i)
                         for (std::size_t t = 0; t < hw; ++t) {
                           const std::size_t idx = (i * c + j) * hw + t;
                           gx[idx] += training ? k * (n.grad[idx] - sum_dy / m - xhat[idx] * sum_dy_xhat / m)
                                               : k * n.grad[idx];
                         }
                     }
                   });
}

}  // namespace bdkit::nn
