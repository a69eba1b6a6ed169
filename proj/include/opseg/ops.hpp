/* Copyright 2026 The Opseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef OPSEG_OPS_HPP_
#define OPSEG_OPS_HPP_

#include <cstdint>
#include <vector>

#include "opseg/tensor.hpp"

namespace opseg {

// 2D cross-correlation (no kernel flip) of input [N,C,H,W] with kernel
// [K,C,h,w] and optional bias [K]. Output [N,K,H',W'] with
// H' = floor((H + 2*pad - h)/stride) + 1. Differentiable w.r.t. all three.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int pad = 0);
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride = 1,
              int pad = 0);

// Elementwise q-th power, q >= 1. Gradient is q * x^(q-1) * upstream.
Tensor elem_pow(const Tensor& input, int q);

Tensor tanh(const Tensor& input);
Tensor relu(const Tensor& input);

// Window maxima over [N,C,H,W]; ties route the gradient to the first maximum
// in scan order.
Tensor maxpool2d(const Tensor& input, int k, int stride);

Tensor avgpool2d(const Tensor& input, int k, int stride);

// Nearest-neighbor 2x replication; gradient sums the four replicated cells.
Tensor upsample2x(const Tensor& input);

// Channel stacking, a first. N/H/W must agree.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Channels [c0, c1) of [N,C,H,W].
Tensor slice_channels(const Tensor& input, int c0, int c1);

// Drops `axis` by fixing it at `index` (e.g. one power slice of a
// [K,C,Q,h,w] weight bank).
Tensor select_index(const Tensor& input, int axis, int index);

Tensor add(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& input);

// Inverted-scaling dropout with a per-call seed; rate 0 is the identity.
Tensor dropout(const Tensor& input, double rate, std::uint64_t seed);

// Weighted sum of per-pixel softmax cross-entropy (mean over pixels) and
// soft multi-class Dice loss (1 - mean soft-DSC over the foreground
// classes). `target` holds one class id per pixel, row-major [N,H,W].
Tensor seg_loss(const Tensor& logits, const std::vector<std::uint8_t>& target,
                double ce_weight, double dice_weight);

}  // namespace opseg

#endif  // OPSEG_OPS_HPP_
