// Copyright 2026 The Dynaquery Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "dynaquery/ops.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <utility>

#include "dynaquery/error.h"

namespace dynaquery {
namespace {

using internal::Node;
using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

// Gradient buffer of input `i`, or null when that input needs none.
double* InputGrad(Node& self, size_t i) {
  Node& in = *self.inputs[i];
  return in.requires_grad ? in.EnsureGrad().data() : nullptr;
}

const Buffer& InputData(const Node& self, size_t i) {
  return self.inputs[i]->data;
}

struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<int64_t> index_a;
  std::vector<int64_t> index_b;
};

std::shared_ptr<BroadcastPlan> PlanBroadcast(const Shape& a, const Shape& b,
                                             const char* op) {
  auto plan = std::make_shared<BroadcastPlan>();
  if (a == b) {
    plan->out = a;
    plan->same = true;
    return plan;
  }
  const size_t rank = std::max(a.size(), b.size());
  Shape pa(rank - a.size(), 1), pb(rank - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  plan->out.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      Fail(ErrorKind::kDimension, op, ": cannot broadcast ", ShapeToString(a),
           " with ", ShapeToString(b));
    }
    plan->out[i] = std::max(pa[i], pb[i]);
  }
  std::vector<int64_t> sa(rank, 0), sb(rank, 0);
  int64_t stride_a = 1, stride_b = 1;
  for (size_t i = rank; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : stride_a;
    sb[i] = pb[i] == 1 ? 0 : stride_b;
    stride_a *= pa[i];
    stride_b *= pb[i];
  }
  const int64_t n = NumElements(plan->out);
  plan->index_a.resize(n);
  plan->index_b.resize(n);
  std::vector<int> counter(rank, 0);
  int64_t ia = 0, ib = 0;
  for (int64_t k = 0; k < n; ++k) {
    plan->index_a[k] = ia;
    plan->index_b[k] = ib;
    for (size_t i = rank; i-- > 0;) {
      ++counter[i];
      ia += sa[i];
      ib += sb[i];
      if (counter[i] < plan->out[i]) break;
      ia -= sa[i] * counter[i];
      ib -= sb[i] * counter[i];
      counter[i] = 0;
    }
  }
  return plan;
}

// f(x, y) forward; dfdx(x, y, out) and dfdy(x, y, out) partials.
template <typename F, typename DX, typename DY>
Tensor Binary(const Tensor& a, const Tensor& b, const char* name, F f, DX dfdx,
              DY dfdy) {
  auto plan = PlanBroadcast(a.shape(), b.shape(), name);
  const auto& x = a.data();
  const auto& y = b.data();
  const int64_t n = NumElements(plan->out);
  Buffer out(n);
  if (plan->same) {
    for (int64_t k = 0; k < n; ++k) out[k] = f(x[k], y[k]);
  } else {
    for (int64_t k = 0; k < n; ++k) {
      out[k] = f(x[plan->index_a[k]], y[plan->index_b[k]]);
    }
  }
  return MakeResult(plan->out, std::move(out), {a, b},
                    [plan, dfdx, dfdy](Node& self) {
                      const auto& x = InputData(self, 0);
                      const auto& y = InputData(self, 1);
                      const auto& g = self.grad;
                      const auto& o = self.data;
                      double* ga = InputGrad(self, 0);
                      double* gb = InputGrad(self, 1);
                      const int64_t n = static_cast<int64_t>(o.size());
                      for (int64_t k = 0; k < n; ++k) {
                        const int64_t i = plan->same ? k : plan->index_a[k];
                        const int64_t j = plan->same ? k : plan->index_b[k];
                        if (ga) ga[i] += g[k] * dfdx(x[i], y[j], o[k]);
                        if (gb) gb[j] += g[k] * dfdy(x[i], y[j], o[k]);
                      }
                    });
}

// f(x) forward; dfdx(x, out) derivative.
template <typename F, typename D>
Tensor Unary(const Tensor& a, F f, D dfdx) {
  const auto& x = a.data();
  Buffer out(x.size());
  for (size_t k = 0; k < x.size(); ++k) out[k] = f(x[k]);
  return MakeResult(a.shape(), std::move(out), {a}, [dfdx](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    const auto& x = InputData(self, 0);
    for (size_t k = 0; k < x.size(); ++k) {
      ga[k] += self.grad[k] * dfdx(x[k], self.data[k]);
    }
  });
}

double StableSigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double StableSoftplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void RequireRank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    Fail(ErrorKind::kDimension, op, ": expected rank ", rank, ", got shape ",
         ShapeToString(t.shape()));
  }
}

}  // namespace

Tensor Add(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor Div(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

// Ties send the gradient to the first operand.
Tensor Minimum(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor Maximum(const Tensor& a, const Tensor& b) {
  return Binary(
      a, b, "Maximum", [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor AddScalar(const Tensor& a, double s) {
  return Unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor MulScalar(const Tensor& a, double s) {
  return Unary(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor Neg(const Tensor& a) { return MulScalar(a, -1.0); }

Tensor Relu(const Tensor& a) {
  return Unary(
      a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor Sigmoid(const Tensor& a) {
  return Unary(a, StableSigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor Exp(const Tensor& a) {
  return Unary(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor Log(const Tensor& a) {
  return Unary(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor Softplus(const Tensor& a) {
  return Unary(a, StableSoftplus,
               [](double x, double) { return StableSigmoid(x); });
}

Tensor Abs(const Tensor& a) {
  return Unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor PowScalar(const Tensor& a, double p) {
  return Unary(
      a, [p](double x) { return std::pow(x, p); },
      [p](double x, double) {
        return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0);
      });
}

Tensor InverseSigmoid(const Tensor& a, double eps) {
  return Unary(
      a,
      [eps](double x) {
        const double p = std::clamp(x, eps, 1.0 - eps);
        return std::log(p / (1.0 - p));
      },
      [eps](double x, double) {
        if (x < eps || x > 1.0 - eps) return 0.0;
        return 1.0 / (x * (1.0 - x));
      });
}

Tensor Reshape(const Tensor& a, Shape shape) {
  if (NumElements(shape) != a.numel()) {
    Fail(ErrorKind::kDimension, "Reshape: ", ShapeToString(a.shape()), " to ",
         ShapeToString(shape));
  }
  return MakeResult(std::move(shape), Buffer(a.node()->data), {a},
                    [](Node& self) {
                      double* ga = InputGrad(self, 0);
                      if (!ga) return;
                      for (size_t k = 0; k < self.grad.size(); ++k)
                        ga[k] += self.grad[k];
                    });
}

Tensor Transpose(const Tensor& a) {
  RequireRank(a, 2, "Transpose");
  const int r = a.dim(0), c = a.dim(1);
  Buffer out(a.numel());
  MatMap(out.data(), c, r) = ConstMatMap(a.data().data(), r, c).transpose();
  return MakeResult({c, r}, std::move(out), {a}, [r, c](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    MatMap(ga, r, c) += ConstMatMap(self.grad.data(), c, r).transpose();
  });
}

Tensor Concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) Fail(ErrorKind::kInput, "Concat of nothing");
  const Shape& first = parts[0].shape();
  const int rank = static_cast<int>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) Fail(ErrorKind::kIndex, "Concat axis ", axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = static_cast<int>(s.size()) == rank;
    for (int i = 0; ok && i < rank; ++i) ok = i == axis || s[i] == first[i];
    if (!ok) {
      Fail(ErrorKind::kDimension, "Concat: ", ShapeToString(s), " vs ",
           ShapeToString(first), " on axis ", axis);
    }
    out_shape[axis] += s[axis];
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first[i];
  for (int i = axis + 1; i < rank; ++i) inner *= first[i];
  const int64_t out_row = out_shape[axis] * inner;
  Buffer out(outer * out_row);
  std::vector<int64_t> offsets;
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const int64_t row = p.dim(axis) * inner;
    const auto& src = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + o * row, row,
                  out.begin() + o * out_row + offset);
    }
    offsets.push_back(offset);
    offset += row;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return MakeResult(
      out_shape, std::move(out), std::move(inputs),
      [offsets, outer, out_row](Node& self) {
        for (size_t p = 0; p < self.inputs.size(); ++p) {
          double* gp = InputGrad(self, p);
          if (!gp) continue;
          const int64_t row =
              static_cast<int64_t>(self.inputs[p]->data.size()) / outer;
          for (int64_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + o * out_row + offsets[p];
            for (int64_t k = 0; k < row; ++k) {
              gp[o * row + k] += g[k];
            }
          }
        }
      });
}

Tensor Slice(const Tensor& a, int axis, int start, int length) {
  const int rank = a.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank || start < 0 || length <= 0 ||
      start + length > a.dim(axis)) {
    Fail(ErrorKind::kIndex, "Slice [", start, ", ", start + length,
         ") on axis ", axis, " of ", ShapeToString(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= a.dim(i);
  const int64_t in_row = a.dim(axis) * inner;
  const int64_t out_row = length * inner;
  const int64_t offset = start * inner;
  Buffer out(outer * out_row);
  const auto& src = a.data();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + o * in_row + offset, out_row,
                out.begin() + o * out_row);
  }
  return MakeResult(out_shape, std::move(out), {a},
                    [outer, in_row, out_row, offset](Node& self) {
                      double* ga = InputGrad(self, 0);
                      if (!ga) return;
                      for (int64_t o = 0; o < outer; ++o) {
                        for (int64_t k = 0; k < out_row; ++k) {
                          ga[o * in_row + offset + k] +=
                              self.grad[o * out_row + k];
                        }
                      }
                    });
}

Tensor GatherRows(const Tensor& a, std::span<const int> indices) {
  RequireRank(a, 2, "GatherRows");
  const int n = a.dim(0), d = a.dim(1);
  const int k = static_cast<int>(indices.size());
  if (k == 0) Fail(ErrorKind::kInput, "GatherRows with no indices");
  std::vector<int> idx(indices.begin(), indices.end());
  Buffer out(static_cast<int64_t>(k) * d);
  const auto& src = a.data();
  for (int r = 0; r < k; ++r) {
    if (idx[r] < 0 || idx[r] >= n) {
      Fail(ErrorKind::kIndex, "GatherRows index ", idx[r], " of ", n);
    }
    std::copy_n(src.begin() + static_cast<int64_t>(idx[r]) * d, d,
                out.begin() + static_cast<int64_t>(r) * d);
  }
  return MakeResult({k, d}, std::move(out), {a}, [idx, d](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    for (size_t r = 0; r < idx.size(); ++r) {
      for (int j = 0; j < d; ++j) {
        ga[static_cast<int64_t>(idx[r]) * d + j] += self.grad[r * d + j];
      }
    }
  });
}

Tensor GatherColumnsAsRows(const Tensor& a, std::span<const int> indices) {
  RequireRank(a, 2, "GatherColumnsAsRows");
  const int d = a.dim(0), n = a.dim(1);
  const int k = static_cast<int>(indices.size());
  if (k == 0) Fail(ErrorKind::kInput, "GatherColumnsAsRows with no indices");
  std::vector<int> idx(indices.begin(), indices.end());
  Buffer out(static_cast<int64_t>(k) * d);
  const auto& src = a.data();
  for (int r = 0; r < k; ++r) {
    if (idx[r] < 0 || idx[r] >= n) {
      Fail(ErrorKind::kIndex, "GatherColumnsAsRows index ", idx[r], " of ", n);
    }
    for (int j = 0; j < d; ++j) {
      out[static_cast<int64_t>(r) * d + j] =
          src[static_cast<int64_t>(j) * n + idx[r]];
    }
  }
  return MakeResult({k, d}, std::move(out), {a}, [idx, d, n](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    for (size_t r = 0; r < idx.size(); ++r) {
      for (int j = 0; j < d; ++j) {
        ga[static_cast<int64_t>(j) * n + idx[r]] += self.grad[r * d + j];
      }
    }
  });
}

Tensor Sum(const Tensor& a) {
  const auto& x = a.data();
  const double s = std::accumulate(x.begin(), x.end(), 0.0);
  return MakeResult({1}, {s}, {a}, [](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    const size_t n = self.inputs[0]->data.size();
    for (size_t k = 0; k < n; ++k) ga[k] += self.grad[0];
  });
}

Tensor Mean(const Tensor& a) {
  return MulScalar(Sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "MatMul");
  RequireRank(b, 2, "MatMul");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    Fail(ErrorKind::kDimension, "MatMul: ", ShapeToString(a.shape()), " x ",
         ShapeToString(b.shape()));
  }
  Buffer out(static_cast<int64_t>(n) * m);
  MatMap(out.data(), n, m).noalias() =
      ConstMatMap(a.data().data(), n, k) * ConstMatMap(b.data().data(), k, m);
  return MakeResult({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    ConstMatMap g(self.grad.data(), n, m);
    if (double* ga = InputGrad(self, 0)) {
      MatMap(ga, n, k).noalias() +=
          g * ConstMatMap(InputData(self, 1).data(), k, m).transpose();
    }
    if (double* gb = InputGrad(self, 1)) {
      MatMap(gb, k, m).noalias() +=
          ConstMatMap(InputData(self, 0).data(), n, k).transpose() * g;
    }
  });
}

Tensor Linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  RequireRank(weight, 2, "Linear");
  const int d_out = weight.dim(0), d_in = weight.dim(1);
  if (input.shape().back() != d_in) {
    Fail(ErrorKind::kDimension, "Linear: input ", ShapeToString(input.shape()),
         " vs weight ", ShapeToString(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != d_out)) {
    Fail(ErrorKind::kDimension, "Linear: bias ", ShapeToString(bias.shape()),
         " vs d_out ", d_out);
  }
  const int rows = static_cast<int>(input.numel() / d_in);
  Shape out_shape = input.shape();
  out_shape.back() = d_out;
  Buffer out(static_cast<int64_t>(rows) * d_out);
  MatMap y(out.data(), rows, d_out);
  y.noalias() = ConstMatMap(input.data().data(), rows, d_in) *
                ConstMatMap(weight.data().data(), d_out, d_in).transpose();
  if (has_bias) {
    y.rowwise() +=
        Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), d_out);
  }
  std::vector<Tensor> inputs = {input, weight};
  if (has_bias) inputs.push_back(bias);
  return MakeResult(
      out_shape, std::move(out), std::move(inputs),
      [rows, d_in, d_out, has_bias](Node& self) {
        ConstMatMap g(self.grad.data(), rows, d_out);
        if (double* gx = InputGrad(self, 0)) {
          MatMap(gx, rows, d_in).noalias() +=
              g * ConstMatMap(InputData(self, 1).data(), d_out, d_in);
        }
        if (double* gw = InputGrad(self, 1)) {
          MatMap(gw, d_out, d_in).noalias() +=
              g.transpose() *
              ConstMatMap(InputData(self, 0).data(), rows, d_in);
        }
        if (has_bias) {
          if (double* gb = InputGrad(self, 2)) {
            Eigen::Map<Eigen::RowVectorXd>(gb, d_out) += g.colwise().sum();
          }
        }
      });
}

int ConvOutputSize(int in, int kernel, int stride, int padding, int dilation) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

namespace {

struct ConvGeometry {
  int batch, c_in, h, w, c_out, kh, kw, out_h, out_w;
  Conv2dOptions opt;
  int64_t patch() const { return static_cast<int64_t>(c_in) * kh * kw; }
  int64_t pixels() const { return static_cast<int64_t>(out_h) * out_w; }
};

// cols[(c*kh + i)*kw + j, oy*out_w + ox] = x[c, oy*s - p + i*dil, ...]
void Im2Col(const double* x, const ConvGeometry& g, double* cols) {
  const int64_t pixels = g.pixels();
  for (int c = 0; c < g.c_in; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        double* row =
            cols + ((static_cast<int64_t>(c) * g.kh + i) * g.kw + j) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.opt.stride - g.opt.padding + i * g.opt.dilation;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int xx =
                ox * g.opt.stride - g.opt.padding + j * g.opt.dilation;
            row[oy * g.out_w + ox] =
                (y >= 0 && y < g.h && xx >= 0 && xx < g.w)
                    ? x[(static_cast<int64_t>(c) * g.h + y) * g.w + xx]
                    : 0.0;
          }
        }
      }
    }
  }
}

void Col2Im(const double* cols, const ConvGeometry& g, double* x) {
  const int64_t pixels = g.pixels();
  for (int c = 0; c < g.c_in; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const double* row =
            cols + ((static_cast<int64_t>(c) * g.kh + i) * g.kw + j) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int y = oy * g.opt.stride - g.opt.padding + i * g.opt.dilation;
          if (y < 0 || y >= g.h) continue;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int xx =
                ox * g.opt.stride - g.opt.padding + j * g.opt.dilation;
            if (xx < 0 || xx >= g.w) continue;
            x[(static_cast<int64_t>(c) * g.h + y) * g.w + xx] +=
                row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor Conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv2dOptions& options) {
  RequireRank(input, 4, "Conv2d");
  RequireRank(kernel, 4, "Conv2d");
  ConvGeometry g{input.dim(0),
                 input.dim(1),
                 input.dim(2),
                 input.dim(3),
                 kernel.dim(0),
                 kernel.dim(2),
                 kernel.dim(3),
                 0,
                 0,
                 options};
  if (kernel.dim(1) != g.c_in) {
    Fail(ErrorKind::kDimension, "Conv2d: input channels ", g.c_in,
         " vs kernel ", ShapeToString(kernel.shape()));
  }
  if (options.dilation < 1 || options.stride < 1 || options.padding < 0) {
    Fail(ErrorKind::kInput, "Conv2d: stride ", options.stride, ", padding ",
         options.padding, ", dilation ", options.dilation);
  }
  if (g.h + 2 * options.padding < options.dilation * (g.kh - 1) + 1 ||
      g.w + 2 * options.padding < options.dilation * (g.kw - 1) + 1) {
    Fail(ErrorKind::kDimension, "Conv2d: padded input ",
         ShapeToString(input.shape()), " smaller than dilated kernel ",
         ShapeToString(kernel.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.c_out)) {
    Fail(ErrorKind::kDimension, "Conv2d: bias ", ShapeToString(bias.shape()));
  }
  g.out_h = ConvOutputSize(g.h, g.kh, options.stride, options.padding,
                           options.dilation);
  g.out_w = ConvOutputSize(g.w, g.kw, options.stride, options.padding,
                           options.dilation);
  const int64_t patch = g.patch(), pixels = g.pixels();
  const int64_t in_plane = static_cast<int64_t>(g.c_in) * g.h * g.w;
  const int64_t out_plane = g.c_out * pixels;
  auto cols = std::make_shared<Buffer>(g.batch * patch * pixels);
  Buffer out(g.batch * out_plane);
  ConstMatMap k(kernel.data().data(), g.c_out, patch);
  for (int b = 0; b < g.batch; ++b) {
    double* col = cols->data() + b * patch * pixels;
    Im2Col(input.data().data() + b * in_plane, g, col);
    MatMap y(out.data() + b * out_plane, g.c_out, pixels);
    y.noalias() = k * ConstMatMap(col, patch, pixels);
    if (has_bias) {
      y.colwise() +=
          Eigen::Map<const Eigen::VectorXd>(bias.data().data(), g.c_out);
    }
  }
  std::vector<Tensor> inputs = {input, kernel};
  if (has_bias) inputs.push_back(bias);
  return MakeResult(
      {g.batch, g.c_out, g.out_h, g.out_w}, std::move(out), std::move(inputs),
      [g, cols, has_bias, patch, pixels, in_plane, out_plane](Node& self) {
        double* gx = InputGrad(self, 0);
        double* gk = InputGrad(self, 1);
        double* gb = has_bias ? InputGrad(self, 2) : nullptr;
        ConstMatMap k(InputData(self, 1).data(), g.c_out, patch);
        Buffer dcol(gx ? patch * pixels : 0);
        for (int b = 0; b < g.batch; ++b) {
          ConstMatMap dy(self.grad.data() + b * out_plane, g.c_out, pixels);
          const double* col = cols->data() + b * patch * pixels;
          if (gk) {
            MatMap(gk, g.c_out, patch).noalias() +=
                dy * ConstMatMap(col, patch, pixels).transpose();
          }
          if (gb) {
            Eigen::Map<Eigen::VectorXd>(gb, g.c_out) += dy.rowwise().sum();
          }
          if (gx) {
            MatMap(dcol.data(), patch, pixels).noalias() = k.transpose() * dy;
            Col2Im(dcol.data(), g, gx + b * in_plane);
          }
        }
      });
}

Tensor PoolChannel(const Tensor& input, PoolMode mode) {
  RequireRank(input, 4, "PoolChannel");
  const int b = input.dim(0), c = input.dim(1);
  const int64_t hw = static_cast<int64_t>(input.dim(2)) * input.dim(3);
  const auto& x = input.data();
  Buffer out(b * hw);
  auto argmax = std::make_shared<std::vector<int>>();
  if (mode == PoolMode::kMax) argmax->resize(b * hw);
  for (int n = 0; n < b; ++n) {
    for (int64_t p = 0; p < hw; ++p) {
      const double* base = x.data() + n * c * hw + p;
      if (mode == PoolMode::kAvg) {
        double s = 0;
        for (int ch = 0; ch < c; ++ch) s += base[ch * hw];
        out[n * hw + p] = s / c;
      } else {
        int best = 0;
        for (int ch = 1; ch < c; ++ch) {
          if (base[ch * hw] > base[best * hw]) best = ch;
        }
        out[n * hw + p] = base[best * hw];
        (*argmax)[n * hw + p] = best;
      }
    }
  }
  return MakeResult({b, 1, input.dim(2), input.dim(3)}, std::move(out), {input},
                    [b, c, hw, mode, argmax](Node& self) {
                      double* gx = InputGrad(self, 0);
                      if (!gx) return;
                      for (int n = 0; n < b; ++n) {
                        for (int64_t p = 0; p < hw; ++p) {
                          const double g = self.grad[n * hw + p];
                          double* base = gx + n * c * hw + p;
                          if (mode == PoolMode::kAvg) {
                            for (int ch = 0; ch < c; ++ch)
                              base[ch * hw] += g / c;
                          } else {
                            base[(*argmax)[n * hw + p] * hw] += g;
                          }
                        }
                      }
                    });
}

Tensor PoolSpatial(const Tensor& input, PoolMode mode) {
  RequireRank(input, 4, "PoolSpatial");
  const int b = input.dim(0), c = input.dim(1);
  const int64_t hw = static_cast<int64_t>(input.dim(2)) * input.dim(3);
  const int64_t planes = static_cast<int64_t>(b) * c;
  const auto& x = input.data();
  Buffer out(planes);
  auto argmax = std::make_shared<std::vector<int64_t>>();
  if (mode == PoolMode::kMax) argmax->resize(planes);
  for (int64_t q = 0; q < planes; ++q) {
    const double* base = x.data() + q * hw;
    if (mode == PoolMode::kAvg) {
      out[q] = std::accumulate(base, base + hw, 0.0) / static_cast<double>(hw);
    } else {
      int64_t best = 0;
      for (int64_t p = 1; p < hw; ++p) {
        if (base[p] > base[best]) best = p;
      }
      out[q] = base[best];
      (*argmax)[q] = best;
    }
  }
  return MakeResult({b, c, 1, 1}, std::move(out), {input},
                    [planes, hw, mode, argmax](Node& self) {
                      double* gx = InputGrad(self, 0);
                      if (!gx) return;
                      for (int64_t q = 0; q < planes; ++q) {
                        const double g = self.grad[q];
                        if (mode == PoolMode::kAvg) {
                          const double share = g / static_cast<double>(hw);
                          for (int64_t p = 0; p < hw; ++p) {
                            gx[q * hw + p] += share;
                          }
                        } else {
                          gx[q * hw + (*argmax)[q]] += g;
                        }
                      }
                    });
}

namespace {

struct ResizeTap {
  int lo, hi;
  double frac;
};

std::vector<ResizeTap> ResizeTaps(int in, int out) {
  std::vector<ResizeTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = std::max((o + 0.5) * scale - 0.5, 0.0);
    const int lo = std::min(static_cast<int>(src), in - 1);
    taps[o] = {lo, std::min(lo + 1, in - 1), src - lo};
  }
  return taps;
}

}  // namespace

Tensor ResizeBilinear(const Tensor& input, int out_h, int out_w) {
  if (input.rank() < 2 || out_h < 1 || out_w < 1) {
    Fail(ErrorKind::kDimension,
         "ResizeBilinear: ", ShapeToString(input.shape()), " to ", out_h, "x",
         out_w);
  }
  const int h = input.dim(-2), w = input.dim(-1);
  const int64_t planes = input.numel() / (static_cast<int64_t>(h) * w);
  auto ty = std::make_shared<std::vector<ResizeTap>>(ResizeTaps(h, out_h));
  auto tx = std::make_shared<std::vector<ResizeTap>>(ResizeTaps(w, out_w));
  Shape out_shape = input.shape();
  out_shape[out_shape.size() - 2] = out_h;
  out_shape[out_shape.size() - 1] = out_w;
  Buffer out(planes * out_h * out_w);
  const auto& x = input.data();
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const ResizeTap& a = (*ty)[oy];
      for (int ox = 0; ox < out_w; ++ox) {
        const ResizeTap& b = (*tx)[ox];
        const double top =
            src[a.lo * w + b.lo] * (1 - b.frac) + src[a.lo * w + b.hi] * b.frac;
        const double bottom =
            src[a.hi * w + b.lo] * (1 - b.frac) + src[a.hi * w + b.hi] * b.frac;
        dst[oy * out_w + ox] = top * (1 - a.frac) + bottom * a.frac;
      }
    }
  }
  return MakeResult(out_shape, std::move(out), {input},
                    [planes, h, w, out_h, out_w, ty, tx](Node& self) {
                      double* gx = InputGrad(self, 0);
                      if (!gx) return;
                      for (int64_t p = 0; p < planes; ++p) {
                        double* dst = gx + p * h * w;
                        const double* g = self.grad.data() + p * out_h * out_w;
                        for (int oy = 0; oy < out_h; ++oy) {
                          const ResizeTap& a = (*ty)[oy];
                          for (int ox = 0; ox < out_w; ++ox) {
                            const ResizeTap& b = (*tx)[ox];
                            const double v = g[oy * out_w + ox];
                            dst[a.lo * w + b.lo] +=
                                v * (1 - a.frac) * (1 - b.frac);
                            dst[a.lo * w + b.hi] += v * (1 - a.frac) * b.frac;
                            dst[a.hi * w + b.lo] += v * a.frac * (1 - b.frac);
                            dst[a.hi * w + b.hi] += v * a.frac * b.frac;
                          }
                        }
                      }
                    });
}

Tensor Softmax(const Tensor& a) {
  const int d = a.shape().back();
  const int64_t rows = a.numel() / d;
  Buffer out(a.numel());
  MatMap y(out.data(), rows, d);
  ConstMatMap x(a.data().data(), rows, d);
  y = (x.colwise() - x.rowwise().maxCoeff()).array().exp();
  y.array().colwise() /= y.rowwise().sum().array();
  return MakeResult(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    ConstMatMap y(self.data.data(), rows, d);
    ConstMatMap g(self.grad.data(), rows, d);
    const Eigen::VectorXd dot = (y.array() * g.array()).rowwise().sum();
    MatMap(ga, rows, d).array() +=
        y.array() * (g.array().colwise() - dot.array());
  });
}

Tensor LogSoftmax(const Tensor& a) {
  const int d = a.shape().back();
  const int64_t rows = a.numel() / d;
  Buffer out(a.numel());
  MatMap y(out.data(), rows, d);
  ConstMatMap x(a.data().data(), rows, d);
  const Eigen::VectorXd mx = x.rowwise().maxCoeff();
  y = x.colwise() - mx;
  const Eigen::VectorXd lse = y.array().exp().rowwise().sum().log();
  y.colwise() -= lse;
  return MakeResult(a.shape(), std::move(out), {a}, [rows, d](Node& self) {
    double* ga = InputGrad(self, 0);
    if (!ga) return;
    ConstMatMap y(self.data.data(), rows, d);
    ConstMatMap g(self.grad.data(), rows, d);
    const Eigen::VectorXd gs = g.rowwise().sum();
    MatMap(ga, rows, d).array() +=
        g.array() - y.array().exp().colwise() * gs.array();
  });
}

Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps) {
  const int d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    Fail(ErrorKind::kDimension, "LayerNorm: features ", d, " vs gamma ",
         ShapeToString(gamma.shape()), ", beta ", ShapeToString(beta.shape()));
  }
  const int64_t rows = x.numel() / d;
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  const auto& xs = x.data();
  const auto& gm = gamma.data();
  const auto& bt = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mean = 0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gm[j] + bt[j];
    }
  }
  return MakeResult(x.shape(), std::move(out), {x, gamma, beta},
                    [rows, d, xhat, inv_std](Node& self) {
                      double* gx = InputGrad(self, 0);
                      double* gg = InputGrad(self, 1);
                      double* gb = InputGrad(self, 2);
                      const auto& gm = InputData(self, 1);
                      for (int64_t r = 0; r < rows; ++r) {
                        const double* g = self.grad.data() + r * d;
                        const double* h = xhat->data() + r * d;
                        if (gg || gb) {
                          for (int j = 0; j < d; ++j) {
                            if (gg) gg[j] += g[j] * h[j];
                            if (gb) gb[j] += g[j];
                          }
                        }
                        if (!gx) continue;
                        double sum_dh = 0, sum_dh_h = 0;
                        for (int j = 0; j < d; ++j) {
                          const double dh = g[j] * gm[j];
                          sum_dh += dh;
                          sum_dh_h += dh * h[j];
                        }
                        const double is = (*inv_std)[r];
                        for (int j = 0; j < d; ++j) {
                          const double dh = g[j] * gm[j];
                          gx[r * d + j] +=
                              is * (dh - sum_dh / d - h[j] * sum_dh_h / d);
                        }
                      }
                    });
}

Tensor Attention(const Tensor& queries, const Tensor& keys,
                 const Tensor& values, int heads) {
  RequireRank(queries, 2, "Attention");
  RequireRank(keys, 2, "Attention");
  RequireRank(values, 2, "Attention");
  const int n = queries.dim(0), d = queries.dim(1), m = keys.dim(0);
  if (keys.dim(1) != d || values.dim(0) != m || values.dim(1) != d) {
    Fail(ErrorKind::kDimension, "Attention: q ", ShapeToString(queries.shape()),
         ", k ", ShapeToString(keys.shape()), ", v ",
         ShapeToString(values.shape()));
  }
  if (heads < 1 || d % heads != 0) {
    Fail(ErrorKind::kDimension, "Attention: width ", d,
         " not divisible by heads ", heads);
  }
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  ConstMatMap q(queries.data().data(), n, d);
  ConstMatMap k(keys.data().data(), m, d);
  ConstMatMap v(values.data().data(), m, d);
  // Row-stochastic attention weights per head, kept for the adjoint.
  auto probs = std::make_shared<std::vector<RowMatrix>>(heads);
  Buffer out(static_cast<int64_t>(n) * d);
  MatMap o(out.data(), n, d);
  for (int h = 0; h < heads; ++h) {
    RowMatrix& p = (*probs)[h];
    p.noalias() =
        q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
    p *= scale;
    p.colwise() -= p.rowwise().maxCoeff();
    p = p.array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    o.middleCols(h * dh, dh).noalias() = p * v.middleCols(h * dh, dh);
  }
  return MakeResult(
      {n, d}, std::move(out), {queries, keys, values},
      [n, m, d, dh, heads, scale, probs](Node& self) {
        double* gq = InputGrad(self, 0);
        double* gk = InputGrad(self, 1);
        double* gv = InputGrad(self, 2);
        ConstMatMap q(InputData(self, 0).data(), n, d);
        ConstMatMap k(InputData(self, 1).data(), m, d);
        ConstMatMap v(InputData(self, 2).data(), m, d);
        ConstMatMap g(self.grad.data(), n, d);
        RowMatrix dp;
        for (int h = 0; h < heads; ++h) {
          const RowMatrix& p = (*probs)[h];
          const auto g_h = g.middleCols(h * dh, dh);
          if (gv) {
            MatMap(gv, m, d).middleCols(h * dh, dh).noalias() +=
                p.transpose() * g_h;
          }
          if (!gq && !gk) continue;
          dp.noalias() = g_h * v.middleCols(h * dh, dh).transpose();
          const Eigen::VectorXd row_dot =
              (dp.array() * p.array()).rowwise().sum();
          dp = p.array() * (dp.array().colwise() - row_dot.array());
          dp *= scale;
          if (gq) {
            MatMap(gq, n, d).middleCols(h * dh, dh).noalias() +=
                dp * k.middleCols(h * dh, dh);
          }
          if (gk) {
            MatMap(gk, m, d).middleCols(h * dh, dh).noalias() +=
                dp.transpose() * q.middleCols(h * dh, dh);
          }
        }
      });
}

}  // namespace dynaquery
