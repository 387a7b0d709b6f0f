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

#ifndef DYNAQUERY_OPS_H_
#define DYNAQUERY_OPS_H_

#include <span>
#include <vector>

#include "dynaquery/tensor.h"

namespace dynaquery {

enum class PoolMode { kAvg, kMax };

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

// Elementwise binary ops broadcast numpy-style: ranks are right-aligned and
// every axis pair must be equal or contain a 1.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Div(const Tensor& a, const Tensor& b);
Tensor Minimum(const Tensor& a, const Tensor& b);
Tensor Maximum(const Tensor& a, const Tensor& b);

Tensor AddScalar(const Tensor& a, double s);
Tensor MulScalar(const Tensor& a, double s);
Tensor Neg(const Tensor& a);
Tensor Relu(const Tensor& a);
Tensor Sigmoid(const Tensor& a);
Tensor Exp(const Tensor& a);
Tensor Log(const Tensor& a);
Tensor Softplus(const Tensor& a);
Tensor Abs(const Tensor& a);
Tensor PowScalar(const Tensor& a, double p);
// log(p / (1 - p)) with p clamped to [eps, 1 - eps].
Tensor InverseSigmoid(const Tensor& a, double eps = 1e-5);

Tensor Reshape(const Tensor& a, Shape shape);
// 2-D transpose.
Tensor Transpose(const Tensor& a);
Tensor Concat(std::span<const Tensor> parts, int axis);
Tensor Slice(const Tensor& a, int axis, int start, int length);
// Rows `indices` of a [n, d] matrix, in the given order.
Tensor GatherRows(const Tensor& a, std::span<const int> indices);
// Columns `indices` of a [d, n] matrix, returned as rows of a [k, d] matrix.
Tensor GatherColumnsAsRows(const Tensor& a, std::span<const int> indices);

Tensor Sum(const Tensor& a);
Tensor Mean(const Tensor& a);

Tensor MatMul(const Tensor& a, const Tensor& b);
// x[..., d_in] * weight[d_out, d_in]^T + bias[d_out]. `bias` may be
// undefined.
Tensor Linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// input [b, c_in, h, w], kernel [c_out, c_in, kh, kw], optional bias [c_out].
Tensor Conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              const Conv2dOptions& options);
inline Tensor Conv2d(const Tensor& input, const Tensor& kernel,
                     const Conv2dOptions& options) {
  return Conv2d(input, kernel, Tensor(), options);
}
int ConvOutputSize(int in, int kernel, int stride, int padding, int dilation);

// [b, c, h, w] -> [b, 1, h, w], reducing over channels.
Tensor PoolChannel(const Tensor& input, PoolMode mode);
// [b, c, h, w] -> [b, c, 1, 1], reducing over space.
Tensor PoolSpatial(const Tensor& input, PoolMode mode);

// Half-pixel bilinear resampling of the two trailing axes (align_corners
// off). Leading axes are treated as independent planes.
Tensor ResizeBilinear(const Tensor& input, int out_h, int out_w);

// Over the last axis.
Tensor Softmax(const Tensor& a);
Tensor LogSoftmax(const Tensor& a);
Tensor LayerNorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

// Multi-head scaled dot-product attention on already projected inputs:
// queries [n, d], keys [m, d], values [m, d]. Head h uses columns
// [h*d/heads, (h+1)*d/heads).
Tensor Attention(const Tensor& queries, const Tensor& keys,
                 const Tensor& values, int heads);

}  // namespace dynaquery

#endif  // DYNAQUERY_OPS_H_
