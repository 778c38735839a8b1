#pragma once

#include <vector>

#include "spx/geometry.hpp"
#include "spx/tensor.hpp"

namespace spx {
namespace ops {

// All ops allocate fresh outputs (inputs are never mutated), verify the
// result is finite, and record a backward rule on the active tape when any
// input requires gradients. Reductions accumulate in double with ascending
// index order so repeated runs are bit-identical.

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n] -> [m,n]
Tensor transpose2d(const Tensor& x);                      // [m,n] -> [n,m]
Tensor reshape(const Tensor& x, std::vector<int> shape);  // shares storage
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor smul(const Tensor& x, float s);
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);      // [n,c] + [c]
Tensor scale_channels(const Tensor& x, const Tensor& gamma);    // [n,c] * [c]
Tensor slice_cols(const Tensor& x, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor mean_axis0(const Tensor& x);   // [k, ...] -> [...]
Tensor mean_rows(const Tensor& x);    // [n,c] -> [c]
Tensor sum_all(const Tensor& x);      // -> [1]

Tensor gelu(const Tensor& x);
// Row-wise layernorm over the channel (last) dimension, eps 1e-6.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// Row-wise softmax with optional boolean mask (nonzero = keep). Masked
// entries are exactly zero in the output; a fully masked row is an error.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);
Tensor softmax_rows(const Tensor& logits);

// Mean cross entropy over a batch of logit rows, with optional label
// smoothing. targets holds one class id per row.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     float label_smoothing = 0.0f);

// --- spatial ops on [c,h,w] maps ---

Tensor depthwise_conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias);
// 3x3 convolution, zero padding 1, arbitrary stride. weight [cout,cin,3,3].
Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride);
// Non-overlapping k x k mean pooling; extents must divide.
Tensor avgpool(const Tensor& x, int k);
// Mean over ceil-semantics cells of size r (last cells may be truncated).
Tensor cell_mean_pool(const Tensor& x, int r);
// Non-overlapping k x k patches flattened to rows of length c*k*k.
Tensor unfold_patches(const Tensor& x, int k);

// --- pair ops over the pixel/superpixel edge list ---

enum class PairSide { pixel, superpixel };

// Per-head dot products along the pair list. `a` rows are indexed by
// `a_side` of each pair, `b` rows by the other side. a,b are [*, C] with C
// divisible by heads; result is [E, heads].
Tensor pair_dot(const Tensor& a, PairSide a_side, const Tensor& b, const GeometryPtr& geom,
                int heads, float scale);

enum class PairGroup { by_pixel, by_superpixel };

// Column-wise softmax within each pair group (a pixel's neighbor list or a
// superpixel's window). x is [E, heads].
Tensor segment_softmax(const Tensor& x, const GeometryPtr& geom, PairGroup group);

// out[target(e), head-group] += p[e,h] * v[source(e), head-group]; the
// target side is the opposite of `v_side`. v is [*, C], p is [E, heads].
Tensor pair_mix(const Tensor& p, const Tensor& v, PairSide v_side, const GeometryPtr& geom);

// Scatters pair-list values [E, heads] into the padded per-head layout
// [heads, n_pixels, 9] with exact zeros on invalid slots.
Tensor pairs_to_padded(const Tensor& p, const GeometryPtr& geom);

// I[i, ch] = sum_slot A[head(ch), i, slot] * S[neighbor, ch], the padded-A
// counterpart of pair_mix used for pixelify. A is [heads, n_pixels, 9].
Tensor padded_mix(const Tensor& a_padded, const Tensor& s, const GeometryPtr& geom);

}  // namespace ops
}  // namespace spx
