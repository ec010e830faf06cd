#pragma once

// Differentiable operations over ad::Var. Image tensors are [N, C, H, W];
// sequence tensors are [T, D].

#include "regiontok/autograd.hpp"

#include <span>
#include <vector>

namespace regiontok::ops {

using ad::Var;

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var silu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);

// Reductions to a single-element var.
Var sum(const Var& a);
Var mean(const Var& a);

// Sum of a list of single-element vars, each scaled by its weight.
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

Var reshape(const Var& a, Shape shape);

// Value is passed through, gradient is blocked.
Var stop_gradient(const Var& a);

// Forward value is `quantized`; the backward pass hands the incoming gradient
// to `z` unchanged.
Var straight_through(const Var& z, const Tensor& quantized);

// Convolution. `bias` may be undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-6);

Var upsample_nearest(const Var& x, int factor);

// Multiplies channel c of an [N, C, H, W] tensor by w[c] (w is constant).
Var channel_scale(const Var& x, std::span<const double> w);

// [N, C, H, W] <-> [N*H*W, C]
Var nchw_to_rows(const Var& x);
Var rows_to_nchw(const Var& rows, int n, int c, int h, int w);

// Picks image n from a batch: [N, C, H, W] -> [1, C, H, W].
Var select_image(const Var& x, int n);

// Stacks [1, C, H, W] tensors along the batch axis.
Var stack_images(std::span<const Var> images);

enum class Padding { Zero, Clamp };

// Samples a [1, C, H, W] image at continuous points. Pixel (r, c) covers
// [c, c+1) x [r, r+1); its center is at (c + 0.5, r + 0.5). points holds
// (x, y) pairs, out_h * out_w of them in row-major order. The sample
// coordinates are constants; the gradient flows to the image only.
Var bilinear_sample(const Var& image, std::span<const double> points, int out_h, int out_w, Padding padding);

// Sequence ops.
Var linear(const Var& x, const Var& weight, const Var& bias);  // x[M,I] * W[O,I]^T + b[O]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var embedding(const Var& table, std::span<const int> ids);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& x, int begin, int end);

// Multi-head causal self-attention over one sequence; qkv is [T, 3D] with
// query, key, value blocks laid out contiguously per row.
Var causal_attention(const Var& qkv, int heads);

// Mean token cross-entropy of logits[T, V] against integer targets.
Var cross_entropy(const Var& logits, std::span<const int> targets);

} // namespace regiontok::ops
