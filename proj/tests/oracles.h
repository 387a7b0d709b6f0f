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

// Naive reference implementations used only by tests. Each one is written
// as direct nested loops and shares no code with the library kernels.

#ifndef DYNAQUERY_TESTS_ORACLES_H_
#define DYNAQUERY_TESTS_ORACLES_H_

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "dynaquery/tensor.h"

namespace dynaquery::oracle {

inline Tensor RandomTensor(std::mt19937_64& rng, Shape shape, double lo = -1.0,
                           double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline double MaxAbsDiff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

inline Tensor Conv2d(const Tensor& x, const Tensor& k, int stride, int pad,
                     int dil) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const int OH = (H + 2 * pad - dil * (KH - 1) - 1) / stride + 1;
  const int OW = (W + 2 * pad - dil * (KW - 1) - 1) / stride + 1;
  std::vector<double> out(static_cast<size_t>(B) * O * OH * OW, 0.0);
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double s = 0;
          for (int c = 0; c < C; ++c)
            for (int i = 0; i < KH; ++i)
              for (int j = 0; j < KW; ++j) {
                const int y = oy * stride - pad + i * dil;
                const int xx = ox * stride - pad + j * dil;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                s += x.at({b, c, y, xx}) * k.at({o, c, i, j});
              }
          out[((static_cast<size_t>(b) * O + o) * OH + oy) * OW + ox] = s;
        }
  return Tensor({B, O, OH, OW}, out);
}

inline Tensor PoolChannel(const Tensor& x, bool max) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> out;
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        double acc = max ? -INFINITY : 0.0;
        for (int c = 0; c < C; ++c) {
          const double v = x.at({b, c, y, xx});
          acc = max ? std::max(acc, v) : acc + v;
        }
        out.push_back(max ? acc : acc / C);
      }
  return Tensor({B, 1, H, W}, out);
}

inline Tensor PoolSpatial(const Tensor& x, bool max) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> out;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double acc = max ? -INFINITY : 0.0;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          const double v = x.at({b, c, y, xx});
          acc = max ? std::max(acc, v) : acc + v;
        }
      out.push_back(max ? acc : acc / (H * W));
    }
  return Tensor({B, C, 1, 1}, out);
}

// x [n, d_in], w [d_out, d_in], b [d_out].
inline Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int d_in = w.dim(1), d_out = w.dim(0);
  const int n = static_cast<int>(x.numel() / d_in);
  std::vector<double> out;
  for (int r = 0; r < n; ++r)
    for (int o = 0; o < d_out; ++o) {
      double s = b.data()[o];
      for (int i = 0; i < d_in; ++i) {
        s += x.data()[static_cast<size_t>(r) * d_in + i] * w.at({o, i});
      }
      out.push_back(s);
    }
  Shape shape = x.shape();
  shape.back() = d_out;
  return Tensor(shape, out);
}

inline Tensor Attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int heads) {
  const int n = q.dim(0), m = k.dim(0), d = q.dim(1), dh = d / heads;
  std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -INFINITY;
      for (int j = 0; j < m; ++j) {
        double dot = 0;
        for (int c = 0; c < dh; ++c)
          dot += q.at({i, h * dh + c}) * k.at({j, h * dh + c});
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (int j = 0; j < m; ++j) z += std::exp(s[j] - mx);
      for (int j = 0; j < m; ++j) {
        const double p = std::exp(s[j] - mx) / z;
        for (int c = 0; c < dh; ++c) {
          out[static_cast<size_t>(i) * d + h * dh + c] +=
              p * v.at({j, h * dh + c});
        }
      }
    }
  return Tensor({n, d}, out);
}

inline Tensor MatMul(const Tensor& a, const Tensor& b) {
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += a.at({i, t}) * b.at({t, j});
      out.push_back(s);
    }
  return Tensor({n, m}, out);
}

// Index of `out_index` (a flat index into `out`) inside a numpy-broadcast
// operand of shape `in`.
inline int64_t BroadcastSource(const Shape& out, const Shape& in,
                               int64_t out_index) {
  int64_t src = 0, stride = 1;
  for (int axis = static_cast<int>(out.size()) - 1,
           k = static_cast<int>(in.size()) - 1;
       axis >= 0; --axis, --k) {
    const int coord = static_cast<int>(out_index % out[axis]);
    out_index /= out[axis];
    if (k < 0) continue;
    if (in[k] != 1) src += coord * stride;
    stride *= in[k];
  }
  return src;
}

template <typename F>
Tensor Binary(const Tensor& a, const Tensor& b, F f) {
  const size_t rank = std::max(a.shape().size(), b.shape().size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    const int da = i < rank - a.shape().size()
                       ? 1
                       : a.shape()[i - (rank - a.shape().size())];
    const int db = i < rank - b.shape().size()
                       ? 1
                       : b.shape()[i - (rank - b.shape().size())];
    out[i] = std::max(da, db);
  }
  std::vector<double> v(NumElements(out));
  for (int64_t i = 0; i < static_cast<int64_t>(v.size()); ++i) {
    v[i] = f(a.data()[BroadcastSource(out, a.shape(), i)],
             b.data()[BroadcastSource(out, b.shape(), i)]);
  }
  return Tensor(out, v);
}

template <typename F>
Tensor Unary(const Tensor& a, F f) {
  std::vector<double> v;
  for (double x : a.data()) v.push_back(f(x));
  return Tensor(a.shape(), v);
}

inline Tensor Transpose(const Tensor& a) {
  const int n = a.dim(0), m = a.dim(1);
  std::vector<double> v;
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < n; ++i) v.push_back(a.at({i, j}));
  return Tensor({m, n}, v);
}

inline Tensor Softmax(const Tensor& a, bool log) {
  const int d = a.shape().back();
  const int64_t rows = a.numel() / d;
  std::vector<double> v;
  for (int64_t r = 0; r < rows; ++r) {
    double mx = -INFINITY;
    for (int j = 0; j < d; ++j) mx = std::max(mx, a.data()[r * d + j]);
    double z = 0;
    for (int j = 0; j < d; ++j) z += std::exp(a.data()[r * d + j] - mx);
    for (int j = 0; j < d; ++j) {
      const double s = a.data()[r * d + j] - mx;
      v.push_back(log ? s - std::log(z) : std::exp(s) / z);
    }
  }
  return Tensor(a.shape(), v);
}

inline Tensor LayerNorm(const Tensor& x, const Tensor& g, const Tensor& b,
                        double eps) {
  const int d = x.shape().back();
  const int64_t rows = x.numel() / d;
  std::vector<double> v;
  for (int64_t r = 0; r < rows; ++r) {
    double mean = 0, var = 0;
    for (int j = 0; j < d; ++j) mean += x.data()[r * d + j] / d;
    for (int j = 0; j < d; ++j) {
      const double c = x.data()[r * d + j] - mean;
      var += c * c / d;
    }
    for (int j = 0; j < d; ++j) {
      v.push_back((x.data()[r * d + j] - mean) / std::sqrt(var + eps) *
                      g.data()[j] +
                  b.data()[j]);
    }
  }
  return Tensor(x.shape(), v);
}

// Half-pixel sampling with edge clamping on the two trailing axes.
inline Tensor ResizeBilinear(const Tensor& x, int oh, int ow) {
  const int h = x.dim(-2), w = x.dim(-1);
  const int64_t planes = x.numel() / (static_cast<int64_t>(h) * w);
  auto sample = [](int o, int in, int out, int* lo, int* hi, double* t) {
    double s = (o + 0.5) * in / out - 0.5;
    if (s < 0) s = 0;
    *lo = static_cast<int>(std::floor(s));
    if (*lo > in - 1) *lo = in - 1;
    *hi = *lo + 1 < in ? *lo + 1 : in - 1;
    *t = s - *lo;
  };
  std::vector<double> v;
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * h * w;
    for (int i = 0; i < oh; ++i) {
      int y0, y1;
      double ty;
      sample(i, h, oh, &y0, &y1, &ty);
      for (int j = 0; j < ow; ++j) {
        int x0, x1;
        double tx;
        sample(j, w, ow, &x0, &x1, &tx);
        v.push_back((1 - ty) * (1 - tx) * src[y0 * w + x0] +
                    (1 - ty) * tx * src[y0 * w + x1] +
                    ty * (1 - tx) * src[y1 * w + x0] +
                    ty * tx * src[y1 * w + x1]);
      }
    }
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  return Tensor(shape, v);
}

// Minimum total cost over every injective assignment of the smaller side,
// summed in row order.
inline double BruteForceAssignment(int rows, int cols,
                                   const std::vector<double>& cost) {
  const bool rows_small = rows <= cols;
  const int small = rows_small ? rows : cols;
  const int large = rows_small ? cols : rows;
  std::vector<int> perm(large);
  for (int i = 0; i < large; ++i) perm[i] = i;
  double best = INFINITY;
  do {
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < small; ++i) {
      pairs.push_back(rows_small ? std::pair{i, perm[i]}
                                 : std::pair{perm[i], i});
    }
    std::sort(pairs.begin(), pairs.end());
    double total = 0;
    for (auto [r, c] : pairs) total += cost[static_cast<size_t>(r) * cols + c];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace dynaquery::oracle

#endif  // DYNAQUERY_TESTS_ORACLES_H_
