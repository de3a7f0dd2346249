#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vkb/errors.hpp"

namespace vkb {

// Sparse vector with strictly increasing indices.  Values are f64; all
// kernels accumulate in f64 regardless of how upstream data is stored.
struct SparseVector {
  std::int64_t dim = 0;
  std::vector<std::int64_t> indices;  // sorted, unique, each in [0, dim)
  std::vector<double> values;         // finite, same length as indices

  std::int64_t nnz() const { return static_cast<std::int64_t>(indices.size()); }

  double sum() const;
  // Value at `index`, 0.0 if absent (binary search).
  double at(std::int64_t index) const;

  // Throws ContractError if indices are out of range, unsorted, duplicated,
  // or any value is non-finite.
  void check() const;

  // Builds a vector from unordered (index, value) pairs: sorts by index,
  // sums duplicates, drops exact zeros.
  static SparseVector from_pairs(std::int64_t dim,
                                 std::vector<std::pair<std::int64_t, double>> pairs);
  static SparseVector one_hot(std::int64_t dim, std::int64_t index, double value = 1.0);
  static SparseVector uniform_over(std::int64_t dim, std::span<const std::int64_t> support);
};

// Row-sparse matrix in compressed row storage.  Column ids within a row are
// sorted and unique.  Rows are visited by span without copying.
struct RaggedMatrix {
  std::int64_t n_rows = 0;
  std::int64_t n_cols = 0;
  std::vector<std::int64_t> row_offsets;  // size n_rows + 1, non-decreasing
  std::vector<std::int64_t> col_ids;      // size nnz
  std::vector<double> values;             // size nnz

  std::int64_t nnz() const { return static_cast<std::int64_t>(col_ids.size()); }
  std::int64_t row_nnz(std::int64_t r) const { return row_offsets[r + 1] - row_offsets[r]; }

  std::span<const std::int64_t> row_cols(std::int64_t r) const {
    return {col_ids.data() + row_offsets[r],
            static_cast<std::size_t>(row_offsets[r + 1] - row_offsets[r])};
  }
  std::span<const double> row_vals(std::int64_t r) const {
    return {values.data() + row_offsets[r],
            static_cast<std::size_t>(row_offsets[r + 1] - row_offsets[r])};
  }

  // Full structural validation (offsets monotone, columns sorted+unique and
  // in range, values finite).  O(nnz); intended for tests and load paths.
  void check() const;

  // Disk round trip.  Layout: u32 magic, u32 version, i64 n_rows, i64 n_cols,
  // i64 nnz, then row_offsets, col_ids, values as little-endian arrays.
  void save(const std::string& path) const;
  static RaggedMatrix load(const std::string& path);

  // Incremental row-major construction.
  class Builder {
   public:
    Builder(std::int64_t n_rows, std::int64_t n_cols);
    // Appends the next row.  Pairs may be unordered; duplicates are an error.
    void push_row(std::vector<std::pair<std::int64_t, double>> pairs);
    RaggedMatrix finish();

   private:
    RaggedMatrix m_;
    std::int64_t rows_pushed_ = 0;
  };
};

// y = x^T M for sparse x: gathers the rows of M selected by x's support,
// scales each by the matching coefficient, and merges by column id.  The
// merge sorts the gathered (col, value) pairs and then sums runs in
// ascending column order, so the result (and its floating-point rounding)
// is independent of row visit order.  Cost O(t log t) for t = total gathered
// entries, i.e. proportional to nnz(x) * max row width up to the log factor.
SparseVector spvec_ragged_matmul(const SparseVector& x, const RaggedMatrix& m);

// Keeps the k largest entries by value; ties broken toward the lower index.
// Result indices are sorted.  k <= 0 is a contract violation; k >= nnz is a
// copy.
SparseVector topk_truncate(const SparseVector& x, std::int64_t k);

// Intersection product: keeps coordinates present in both inputs, with the
// values multiplied.  Coordinates present in only one input are dropped
// (absent entries are zeros).
SparseVector elementwise_product(const SparseVector& a, const SparseVector& b);

// Softmax over the support only, with temperature: out_i proportional to
// exp(x_i / temperature), normalized across the stored entries.  Absent
// coordinates stay absent (they are treated as -inf, not 0).  Max-shifted
// for stability; sums to 1 within 1e-12 for nonempty input.
SparseVector sparse_softmax(const SparseVector& x, double temperature);

// Given y = sparse_softmax(x, temperature) and dL/dy on the same support,
// returns dL/dx = (diag(y) - y y^T) / temperature * dL/dy restricted to the
// support.  `softmax_out` must be the forward output (not the input).
SparseVector sparse_softmax_backward(const SparseVector& softmax_out,
                                     const SparseVector& upstream, double temperature);

}  // namespace vkb
