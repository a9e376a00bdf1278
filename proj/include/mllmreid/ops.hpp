#pragma once
// Differentiable tensor operations. Every op records itself on the tape when
// an input requires grad; see tests/autodiff_test.cpp for the gradient checks.

#include <cstddef>
#include <span>
#include <vector>

#include "mllmreid/tensor.hpp"

namespace mllmreid::ad {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// x[n,in] * w[in,out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
// x[n,d] + t[m,d] with t repeated down the rows; n must be a multiple of m.
Tensor add_tiled(const Tensor& x, const Tensor& t);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor relu(const Tensor& a);
// tanh approximation
Tensor gelu(const Tensor& a);

// Normalizes each row over the last dimension, then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Multi-head scaled dot-product self-attention over packed sequences.
/// qkv is [B*L, 3d] holding Q|K|V column blocks; returns [B*L, d]. With
/// `causal`, position i attends to positions <= i of its own sequence.
Tensor attention(const Tensor& qkv, std::size_t seq_len, std::size_t heads, bool causal);

/// Mean over rows with weight > 0 of -log softmax(logits)[target], weighted by
/// the row weight. Empty `weights` means every row has weight 1.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::span<const double> weights = {});

// Row lookup: weight[V,d], ids -> [ids.size(), d]
Tensor embedding(const Tensor& weight, std::span<const std::size_t> ids);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
// Copy of base with row rows[k] replaced by src row k.
Tensor replace_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& src);
// Output row g is the mean of x's rows listed in groups[g].
Tensor mean_rows_grouped(const Tensor& x, const std::vector<std::vector<std::size_t>>& groups);

// Euclidean distances between rows: a[n,d], b[m,d] -> [n,m]. Zero distance
// has zero (sub)gradient.
Tensor pairwise_distance(const Tensor& a, const Tensor& b);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
// Flat-index gather into a rank-1 tensor.
Tensor gather_elements(const Tensor& x, std::span<const std::size_t> flat_indices);

}  // namespace mllmreid::ad
