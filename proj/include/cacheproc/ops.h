#pragma once

#include <vector>

#include "cacheproc/tape.h"
#include "cacheproc/tensor.h"

namespace cacheproc::ops {

// Elementwise; operands must match in shape and dtype.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Multiply by a plain constant / by a 1-element tensor (e.g. a learnable gate).
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);

// 2-d linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Row-wise nonlinearities over 2-d tensors.
Tensor row_softmax(const Tensor& a);
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-5);

// Pointwise.
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

// Structural ops (row-major 2-d).
Tensor concat_rows(const std::vector<Tensor>& xs);
Tensor concat_cols(const std::vector<Tensor>& xs);
Tensor slice_rows(const Tensor& x, size_t r0, size_t r1);
Tensor slice_cols(const Tensor& x, size_t c0, size_t c1);
Tensor gather_rows(const Tensor& x, const std::vector<size_t>& idx);
// Functional in-place: returns x with rows at idx replaced (idx must be unique).
Tensor scatter_rows(const Tensor& x, const std::vector<size_t>& idx, const Tensor& rows);
Tensor reshape(const Tensor& x, std::vector<size_t> shape);

Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Rotary position encoding over per-head channel pairs; row r sits at absolute
// position first_pos + r. x is [rows, heads*head_dim], head_dim even.
Tensor rope(const Tensor& x, size_t first_pos, size_t heads, double base);

// Per-row losses: lse(logits_r) - logits_r[target_r].
Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets);

// Full reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Copies data out of the tape; gradients never flow through the result.
Tensor detach(const Tensor& x);

// Index of the row maximum; ties resolve to the lowest index.
size_t argmax_row(const Tensor& t, size_t row);

}  // namespace cacheproc::ops
