#include "vkb/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vkb/util.hpp"

namespace vkb {

namespace {
constexpr std::uint32_t kRaggedMagic = 0x52414747;  // "RAGG"
constexpr std::uint32_t kRaggedVersion = 1;
}  // namespace

double SparseVector::sum() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

double SparseVector::at(std::int64_t index) const {
  auto it = std::lower_bound(indices.begin(), indices.end(), index);
  if (it == indices.end() || *it != index) return 0.0;
  return values[static_cast<std::size_t>(it - indices.begin())];
}

void SparseVector::check() const {
  if (dim < 0) throw ContractError("SparseVector: negative dim");
  if (indices.size() != values.size())
    throw ContractError("SparseVector: indices/values length mismatch");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= dim)
      throw ContractError("SparseVector: index out of range");
    if (i > 0 && indices[i] <= indices[i - 1])
      throw ContractError("SparseVector: indices not strictly increasing");
    if (!std::isfinite(values[i])) throw ContractError("SparseVector: non-finite value");
  }
}

SparseVector SparseVector::from_pairs(std::int64_t dim,
                                      std::vector<std::pair<std::int64_t, double>> pairs) {
  std::sort(pairs.begin(), pairs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  SparseVector out;
  out.dim = dim;
  out.indices.reserve(pairs.size());
  out.values.reserve(pairs.size());
  std::size_t i = 0;
  while (i < pairs.size()) {
    std::int64_t idx = pairs[i].first;
    double acc = 0.0;
    while (i < pairs.size() && pairs[i].first == idx) {
      acc += pairs[i].second;
      ++i;
    }
    if (acc != 0.0) {
      out.indices.push_back(idx);
      out.values.push_back(acc);
    }
  }
  out.check();
  return out;
}

SparseVector SparseVector::one_hot(std::int64_t dim, std::int64_t index, double value) {
  SparseVector out;
  out.dim = dim;
  out.indices = {index};
  out.values = {value};
  out.check();
  return out;
}

SparseVector SparseVector::uniform_over(std::int64_t dim,
                                        std::span<const std::int64_t> support) {
  if (support.empty()) throw ContractError("uniform_over: empty support");
  std::vector<std::pair<std::int64_t, double>> pairs;
  pairs.reserve(support.size());
  double w = 1.0 / static_cast<double>(support.size());
  for (std::int64_t i : support) pairs.emplace_back(i, w);
  return from_pairs(dim, std::move(pairs));
}

void RaggedMatrix::check() const {
  if (n_rows < 0 || n_cols < 0) throw ContractError("RaggedMatrix: negative shape");
  if (row_offsets.size() != static_cast<std::size_t>(n_rows) + 1)
    throw ContractError("RaggedMatrix: row_offsets size mismatch");
  if (row_offsets.front() != 0 || row_offsets.back() != nnz())
    throw ContractError("RaggedMatrix: row_offsets endpoints wrong");
  if (col_ids.size() != values.size())
    throw ContractError("RaggedMatrix: col_ids/values length mismatch");
  for (std::int64_t r = 0; r < n_rows; ++r) {
    if (row_offsets[r + 1] < row_offsets[r])
      throw ContractError("RaggedMatrix: row_offsets not monotone");
    for (std::int64_t i = row_offsets[r]; i < row_offsets[r + 1]; ++i) {
      if (col_ids[i] < 0 || col_ids[i] >= n_cols)
        throw ContractError("RaggedMatrix: column out of range");
      if (i > row_offsets[r] && col_ids[i] <= col_ids[i - 1])
        throw ContractError("RaggedMatrix: columns not strictly increasing in row");
      if (!std::isfinite(values[i])) throw ContractError("RaggedMatrix: non-finite value");
    }
  }
}

void RaggedMatrix::save(const std::string& path) const {
  BinaryWriter w(path);
  w.write_u32(kRaggedMagic);
  w.write_u32(kRaggedVersion);
  w.write_i64(n_rows);
  w.write_i64(n_cols);
  w.write_i64(nnz());
  w.write_vec(row_offsets);
  w.write_vec(col_ids);
  w.write_vec(values);
  w.close();
}

RaggedMatrix RaggedMatrix::load(const std::string& path) {
  BinaryReader r(path);
  expect_magic(r, kRaggedMagic, kRaggedVersion, "ragged matrix");
  RaggedMatrix m;
  m.n_rows = r.read_i64();
  m.n_cols = r.read_i64();
  std::int64_t nnz = r.read_i64();
  if (m.n_rows < 0 || m.n_cols < 0 || nnz < 0)
    throw IoError("ragged matrix header corrupt: " + path);
  r.read_vec(m.row_offsets, static_cast<std::size_t>(m.n_rows) + 1);
  r.read_vec(m.col_ids, static_cast<std::size_t>(nnz));
  r.read_vec(m.values, static_cast<std::size_t>(nnz));
  m.check();
  return m;
}

RaggedMatrix::Builder::Builder(std::int64_t n_rows, std::int64_t n_cols) {
  if (n_rows < 0 || n_cols < 0) throw ContractError("RaggedMatrix::Builder: negative shape");
  m_.n_rows = n_rows;
  m_.n_cols = n_cols;
  m_.row_offsets.reserve(static_cast<std::size_t>(n_rows) + 1);
  m_.row_offsets.push_back(0);
}

void RaggedMatrix::Builder::push_row(std::vector<std::pair<std::int64_t, double>> pairs) {
  if (rows_pushed_ >= m_.n_rows) throw ContractError("Builder::push_row: too many rows");
  std::sort(pairs.begin(), pairs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].first < 0 || pairs[i].first >= m_.n_cols)
      throw ContractError("Builder::push_row: column out of range");
    if (i > 0 && pairs[i].first == pairs[i - 1].first)
      throw ContractError("Builder::push_row: duplicate column in row");
    m_.col_ids.push_back(pairs[i].first);
    m_.values.push_back(pairs[i].second);
  }
  m_.row_offsets.push_back(m_.nnz());
  ++rows_pushed_;
}

RaggedMatrix RaggedMatrix::Builder::finish() {
  if (rows_pushed_ != m_.n_rows) throw ContractError("Builder::finish: missing rows");
  m_.check();
  return std::move(m_);
}

SparseVector spvec_ragged_matmul(const SparseVector& x, const RaggedMatrix& m) {
  if (x.dim != m.n_rows)
    throw ContractError("spvec_ragged_matmul: x.dim != m.n_rows");

  // Gather scaled row entries, then merge by column.  A sort-then-scan merge
  // costs O(t log t) but makes the accumulation order (and therefore the
  // exact floating-point result) a function of the data alone.
  std::size_t total = 0;
  for (std::size_t i = 0; i < x.indices.size(); ++i)
    total += static_cast<std::size_t>(m.row_nnz(x.indices[i]));

  std::vector<std::pair<std::int64_t, double>> gathered;
  gathered.reserve(total);
  for (std::size_t i = 0; i < x.indices.size(); ++i) {
    const std::int64_t r = x.indices[i];
    const double coef = x.values[i];
    auto cols = m.row_cols(r);
    auto vals = m.row_vals(r);
    for (std::size_t j = 0; j < cols.size(); ++j)
      gathered.emplace_back(cols[j], coef * vals[j]);
  }
  std::sort(gathered.begin(), gathered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  SparseVector out;
  out.dim = m.n_cols;
  std::size_t i = 0;
  while (i < gathered.size()) {
    const std::int64_t col = gathered[i].first;
    double acc = 0.0;
    while (i < gathered.size() && gathered[i].first == col) {
      acc += gathered[i].second;
      ++i;
    }
    if (acc != 0.0) {
      out.indices.push_back(col);
      out.values.push_back(acc);
    }
  }
  return out;
}

SparseVector topk_truncate(const SparseVector& x, std::int64_t k) {
  if (k <= 0) throw ContractError("topk_truncate: k must be positive");
  if (k >= x.nnz()) return x;

  // Order positions by (value desc, index asc) and keep the first k.
  std::vector<std::size_t> order(x.indices.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     if (x.values[a] != x.values[b]) return x.values[a] > x.values[b];
                     return x.indices[a] < x.indices[b];
                   });
  order.resize(static_cast<std::size_t>(k));
  std::sort(order.begin(), order.end());  // restore index order

  SparseVector out;
  out.dim = x.dim;
  out.indices.reserve(order.size());
  out.values.reserve(order.size());
  for (std::size_t pos : order) {
    out.indices.push_back(x.indices[pos]);
    out.values.push_back(x.values[pos]);
  }
  return out;
}

SparseVector elementwise_product(const SparseVector& a, const SparseVector& b) {
  if (a.dim != b.dim) throw ContractError("elementwise_product: dim mismatch");
  SparseVector out;
  out.dim = a.dim;
  std::size_t i = 0, j = 0;
  while (i < a.indices.size() && j < b.indices.size()) {
    if (a.indices[i] < b.indices[j]) {
      ++i;
    } else if (a.indices[i] > b.indices[j]) {
      ++j;
    } else {
      out.indices.push_back(a.indices[i]);
      out.values.push_back(a.values[i] * b.values[j]);
      ++i;
      ++j;
    }
  }
  return out;
}

SparseVector sparse_softmax(const SparseVector& x, double temperature) {
  if (temperature <= 0.0) throw ContractError("sparse_softmax: temperature must be positive");
  SparseVector out;
  out.dim = x.dim;
  out.indices = x.indices;
  if (x.values.empty()) return out;

  double mx = x.values[0];
  for (double v : x.values) mx = std::max(mx, v);

  out.values.resize(x.values.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.values.size(); ++i) {
    out.values[i] = std::exp((x.values[i] - mx) / temperature);
    z += out.values[i];
  }
  for (double& v : out.values) v /= z;
  return out;
}

SparseVector sparse_softmax_backward(const SparseVector& softmax_out,
                                     const SparseVector& upstream, double temperature) {
  if (temperature <= 0.0)
    throw ContractError("sparse_softmax_backward: temperature must be positive");
  if (softmax_out.dim != upstream.dim || softmax_out.indices != upstream.indices)
    throw ContractError("sparse_softmax_backward: supports must match");

  double dot = 0.0;
  for (std::size_t i = 0; i < softmax_out.values.size(); ++i)
    dot += softmax_out.values[i] * upstream.values[i];

  SparseVector out;
  out.dim = softmax_out.dim;
  out.indices = softmax_out.indices;
  out.values.resize(softmax_out.values.size());
  for (std::size_t i = 0; i < softmax_out.values.size(); ++i)
    out.values[i] = softmax_out.values[i] * (upstream.values[i] - dot) / temperature;
  return out;
}

}  // namespace vkb
