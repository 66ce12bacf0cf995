#pragma once

#include <memory>
#include <vector>

#include "usrf/rng.hpp"
#include "usrf/tensor.hpp"

// Differentiable operations over Tape-recorded tensors. Every function records
// one node and its exact backward rule. Tensors are rank-2; vectors are 1xn rows.

namespace usrf {

using IndexList = std::shared_ptr<const std::vector<Index>>;

inline IndexList make_index_list(std::vector<Index> idx) {
  return std::make_shared<const std::vector<Index>>(std::move(idx));
}

// Linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Index rows, Index cols);

// Elementwise; same shapes, or one side 1x1 broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // Hadamard
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

/// x + 1·b for a 1xc row vector b.
Tensor add_rowvec(const Tensor& x, const Tensor& b);
/// x·W + b
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
/// Row i of x scaled by w(i,0).
Tensor scale_rows(const Tensor& x, const Tensor& w);

// Activations
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // exact erf form
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softplus(const Tensor& x);

// Reductions
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Row-wise sums grouped by segment id -> nseg x cols.
Tensor segment_sum(const Tensor& x, const IndexList& seg, Index nseg);
Tensor segment_mean(const Tensor& x, const IndexList& seg, Index nseg);

// Structure
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, Index start, Index count);
Tensor gather_rows(const Tensor& x, const IndexList& idx);
Tensor scatter_add_rows(const Tensor& x, const IndexList& idx, Index nrows);

/// Inverted dropout: identity when !training or p == 0.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

/// axis 1: each row sums to one; axis 0: each column sums to one.
Tensor softmax(const Tensor& x, int axis);
/// Normalizes each row (population variance), then applies gain/bias (1xc).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Attention helpers
/// Softmax of each column restricted to rows sharing a segment id.
Tensor segment_softmax(const Tensor& scores, const IndexList& seg, Index nseg);
/// out(m,h) = <q(m, head h slice), k(m, head h slice)>
Tensor head_dot(const Tensor& q, const Tensor& k, Index heads);
/// out(m,j) = v(m,j) * a(m, head of j)
Tensor head_scale(const Tensor& v, const Tensor& a, Index heads);
/// Blockwise products over `blocks` stacked row blocks: a_b·b_b or a_b·b_bᵀ.
Tensor block_matmul(const Tensor& a, const Tensor& b, Index blocks, bool transpose_b);
/// Per stacked block U_b (positions x channels): W·U_b + bias·1ᵀ.
Tensor spatial_gating(const Tensor& w, const Tensor& bias, const Tensor& u);

}  // namespace usrf
