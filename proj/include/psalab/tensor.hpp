#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "psalab/common.hpp"

namespace psalab {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. Copying a TensorT copies the handle; the buffers
// are shared. That is what makes tied embeddings a single stored object.
template <typename Real>
struct TensorT {
  Shape shape;
  std::shared_ptr<std::vector<Real>> data;
  std::shared_ptr<std::vector<Real>> grad;  // null unless requires_grad
  bool requires_grad = false;

  TensorT() = default;

  static TensorT zeros(Shape s) {
    TensorT t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<Real>>(numel(t.shape), Real(0));
    return t;
  }

  static TensorT full(Shape s, Real v) {
    TensorT t = zeros(std::move(s));
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static TensorT from(Shape s, std::vector<Real> values) {
    if (static_cast<int64_t>(values.size()) != numel(s))
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(s));
    TensorT t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<Real>>(std::move(values));
    return t;
  }

  static TensorT randn(Shape s, Rng& rng, double stddev = 1.0) {
    TensorT t = zeros(std::move(s));
    for (Real& v : *t.data) v = static_cast<Real>(rng.normal(0.0, stddev));
    return t;
  }

  int64_t size() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  bool defined() const { return static_cast<bool>(data); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (shape.size() < 2) return shape.empty() ? 1 : shape[0];
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return static_cast<int>(c);
  }

  Real& at(int r, int c) { return (*data)[static_cast<int64_t>(r) * cols() + c]; }
  Real at(int r, int c) const {
    return (*data)[static_cast<int64_t>(r) * cols() + c];
  }
  Real& operator[](int64_t i) { return (*data)[i]; }
  Real operator[](int64_t i) const { return (*data)[i]; }

  Real scalar() const {
    if (size() != 1) throw std::invalid_argument("scalar() on tensor of shape " + shape_str(shape));
    return (*data)[0];
  }

  void set_requires_grad(bool want) {
    requires_grad = want;
    if (want && !grad)
      grad = std::make_shared<std::vector<Real>>(data->size(), Real(0));
    if (!want) grad.reset();
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Real(0));
  }

  TensorT clone() const {  // deep copy of values; grads not copied
    TensorT t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(*data);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename Real>
using EigenRM = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
Eigen::Map<EigenRM<Real>> mat(TensorT<Real>& t) {
  return Eigen::Map<EigenRM<Real>>(t.data->data(), t.rows(), t.cols());
}

template <typename Real>
Eigen::Map<const EigenRM<Real>> mat(const TensorT<Real>& t) {
  return Eigen::Map<const EigenRM<Real>>(t.data->data(), t.rows(), t.cols());
}

// Grad buffers are always written through the shared handle; const-ness of
// the handle does not extend to the buffer.
template <typename Real>
Eigen::Map<EigenRM<Real>> grad_mat(const TensorT<Real>& t) {
  return Eigen::Map<EigenRM<Real>>(t.grad->data(), t.rows(), t.cols());
}

template <typename Real>
bool all_finite(const TensorT<Real>& t) {
  for (Real v : *t.data)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename Real>
void check_finite(const TensorT<Real>& t, const std::string& what) {
  if (!all_finite(t))
    throw std::runtime_error(what + ": non-finite value encountered");
}

// Records one backward closure per forward operation, in forward order.
// Forward order is a topological order of the graph, so replaying the
// closures in reverse visits every node exactly once.
template <typename Real>
class Tape {
 public:
  bool recording = true;

  void record(std::function<void()> backward_fn) {
    if (recording) nodes_.push_back(std::move(backward_fn));
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape. Grads accumulate
  // additively; callers zero parameter grads between steps.
  void backward(TensorT<Real>& loss) {
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(loss.shape));
    if (!loss.grad)
      throw std::invalid_argument("backward: loss does not require grad");
    (*loss.grad)[0] += Real(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <typename Real>
TensorT<Real> make_output(Tape<Real>& tape, Shape shape, bool any_input_grad) {
  TensorT<Real> out = TensorT<Real>::zeros(std::move(shape));
  if (tape.recording && any_input_grad) out.set_requires_grad(true);
  return out;
}

template <typename Real>
bool wants(const Tape<Real>& tape, const TensorT<Real>& t) {
  return tape.recording && t.requires_grad;
}

}  // namespace detail

// ---- primitive ops -------------------------------------------------------

template <typename Real>
TensorT<Real> matmul(Tape<Real>& tape, const TensorT<Real>& a,
                     const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    throw std::invalid_argument("matmul: inner dimensions disagree for " +
                                shape_str(a.shape) + " and " + shape_str(b.shape));
  TensorT<Real> out = detail::make_output(
      tape, {a.shape[0], b.shape[1]}, a.requires_grad || b.requires_grad);
  mat(out).noalias() = mat(a) * mat(b);
  if (out.requires_grad) {
    tape.record([a, b, out]() {
      if (a.grad) grad_mat(a).noalias() += grad_mat(out) * mat(b).transpose();
      if (b.grad) grad_mat(b).noalias() += mat(a).transpose() * grad_mat(out);
    });
  }
  return out;
}

// C = A * B^T; the natural shape for attention logits.
template <typename Real>
TensorT<Real> matmul_nt(Tape<Real>& tape, const TensorT<Real>& a,
                        const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw std::invalid_argument("matmul_nt: inner dimensions disagree for " +
                                shape_str(a.shape) + " and " + shape_str(b.shape));
  TensorT<Real> out = detail::make_output(
      tape, {a.shape[0], b.shape[0]}, a.requires_grad || b.requires_grad);
  mat(out).noalias() = mat(a) * mat(b).transpose();
  if (out.requires_grad) {
    tape.record([a, b, out]() {
      if (a.grad) grad_mat(a).noalias() += grad_mat(out) * mat(b);
      if (b.grad) grad_mat(b).noalias() += grad_mat(out).transpose() * mat(a);
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> add(Tape<Real>& tape, const TensorT<Real>& a,
                  const TensorT<Real>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  TensorT<Real> out =
      detail::make_output(tape, a.shape, a.requires_grad || b.requires_grad);
  for (int64_t i = 0; i < out.size(); ++i)
    (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (out.requires_grad) {
    tape.record([a, b, out]() {
      if (a.grad)
        for (int64_t i = 0; i < out.size(); ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.grad)
        for (int64_t i = 0; i < out.size(); ++i) (*b.grad)[i] += (*out.grad)[i];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> mul(Tape<Real>& tape, const TensorT<Real>& a,
                  const TensorT<Real>& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  TensorT<Real> out =
      detail::make_output(tape, a.shape, a.requires_grad || b.requires_grad);
  for (int64_t i = 0; i < out.size(); ++i)
    (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (out.requires_grad) {
    tape.record([a, b, out]() {
      if (a.grad)
        for (int64_t i = 0; i < out.size(); ++i)
          (*a.grad)[i] += (*out.grad)[i] * (*b.data)[i];
      if (b.grad)
        for (int64_t i = 0; i < out.size(); ++i)
          (*b.grad)[i] += (*out.grad)[i] * (*a.data)[i];
    });
  }
  return out;
}

// a[m x n] + row[n], broadcast over rows.
template <typename Real>
TensorT<Real> add_row(Tape<Real>& tape, const TensorT<Real>& a,
                      const TensorT<Real>& row) {
  if (a.rank() != 2 || row.size() != a.shape[1])
    throw std::invalid_argument("add_row: cannot broadcast " +
                                shape_str(row.shape) + " over " +
                                shape_str(a.shape));
  TensorT<Real> out =
      detail::make_output(tape, a.shape, a.requires_grad || row.requires_grad);
  const int m = a.shape[0], n = a.shape[1];
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) = a.at(i, j) + (*row.data)[j];
  if (out.requires_grad) {
    tape.record([a, row, out, m, n]() {
      if (a.grad)
        for (int64_t i = 0; i < out.size(); ++i) (*a.grad)[i] += (*out.grad)[i];
      if (row.grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            (*row.grad)[j] += (*out.grad)[static_cast<int64_t>(i) * n + j];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> scale(Tape<Real>& tape, const TensorT<Real>& a, Real c) {
  TensorT<Real> out = detail::make_output(tape, a.shape, a.requires_grad);
  for (int64_t i = 0; i < out.size(); ++i) (*out.data)[i] = (*a.data)[i] * c;
  if (out.requires_grad) {
    tape.record([a, out, c]() {
      if (a.grad)
        for (int64_t i = 0; i < out.size(); ++i)
          (*a.grad)[i] += (*out.grad)[i] * c;
    });
  }
  return out;
}

// Vertical concatenation [a; b]. Either block may have zero rows.
template <typename Real>
TensorT<Real> concat_rows(Tape<Real>& tape, const TensorT<Real>& a,
                          const TensorT<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw std::invalid_argument("concat_rows: column mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int n = a.shape[1], ra = a.shape[0], rb = b.shape[0];
  TensorT<Real> out = detail::make_output(
      tape, {ra + rb, n}, a.requires_grad || b.requires_grad);
  std::copy(a.data->begin(), a.data->end(), out.data->begin());
  std::copy(b.data->begin(), b.data->end(), out.data->begin() + a.size());
  if (out.requires_grad) {
    tape.record([a, b, out]() {
      if (a.grad)
        for (int64_t i = 0; i < a.size(); ++i) (*a.grad)[i] += (*out.grad)[i];
      if (b.grad)
        for (int64_t i = 0; i < b.size(); ++i)
          (*b.grad)[i] += (*out.grad)[a.size() + i];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> concat_cols(Tape<Real>& tape,
                          const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  const int m = parts[0].shape[0];
  int n = 0;
  bool want = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape[0] != m)
      throw std::invalid_argument("concat_cols: row mismatch at " +
                                  shape_str(p.shape));
    n += p.shape[1];
    want = want || p.requires_grad;
  }
  TensorT<Real> out = detail::make_output(tape, {m, n}, want);
  int c0 = 0;
  for (const auto& p : parts) {
    const int pc = p.shape[1];
    for (int i = 0; i < m; ++i)
      std::copy(p.data->begin() + static_cast<int64_t>(i) * pc,
                p.data->begin() + static_cast<int64_t>(i + 1) * pc,
                out.data->begin() + static_cast<int64_t>(i) * n + c0);
    c0 += pc;
  }
  if (out.requires_grad) {
    tape.record([parts, out, m, n]() {
      int c = 0;
      for (auto& p : parts) {
        const int pc = p.shape[1];
        if (p.grad)
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < pc; ++j)
              (*p.grad)[static_cast<int64_t>(i) * pc + j] +=
                  (*out.grad)[static_cast<int64_t>(i) * n + c + j];
        c += pc;
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> slice_rows(Tape<Real>& tape, const TensorT<Real>& a, int r0,
                         int r1) {
  if (a.rank() != 2 || r0 < 0 || r1 < r0 || r1 > a.shape[0])
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) +
                                ", " + std::to_string(r1) + ") for " +
                                shape_str(a.shape));
  const int n = a.shape[1];
  TensorT<Real> out = detail::make_output(tape, {r1 - r0, n}, a.requires_grad);
  std::copy(a.data->begin() + static_cast<int64_t>(r0) * n,
            a.data->begin() + static_cast<int64_t>(r1) * n, out.data->begin());
  if (out.requires_grad) {
    tape.record([a, out, r0, n]() {
      if (a.grad)
        for (int64_t i = 0; i < out.size(); ++i)
          (*a.grad)[static_cast<int64_t>(r0) * n + i] += (*out.grad)[i];
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> slice_cols(Tape<Real>& tape, const TensorT<Real>& a, int c0,
                         int c1) {
  if (a.rank() != 2 || c0 < 0 || c1 < c0 || c1 > a.shape[1])
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) +
                                ", " + std::to_string(c1) + ") for " +
                                shape_str(a.shape));
  const int m = a.shape[0], n = a.shape[1], w = c1 - c0;
  TensorT<Real> out = detail::make_output(tape, {m, w}, a.requires_grad);
  for (int i = 0; i < m; ++i)
    std::copy(a.data->begin() + static_cast<int64_t>(i) * n + c0,
              a.data->begin() + static_cast<int64_t>(i) * n + c1,
              out.data->begin() + static_cast<int64_t>(i) * w);
  if (out.requires_grad) {
    tape.record([a, out, c0, m, n, w]() {
      if (a.grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            (*a.grad)[static_cast<int64_t>(i) * n + c0 + j] +=
                (*out.grad)[static_cast<int64_t>(i) * w + j];
    });
  }
  return out;
}

namespace detail {

// Shared softmax core; mask (when non-null, row-major m x n) marks admitted
// positions. Masked entries get zero probability. Max-subtraction keeps the
// exponentials in range.
template <typename Real>
TensorT<Real> softmax_rows_impl(Tape<Real>& tape, const TensorT<Real>& t,
                                const std::vector<uint8_t>* mask) {
  if (t.rank() != 2)
    throw std::invalid_argument("softmax_rows: want rank 2, got " +
                                shape_str(t.shape));
  const int m = t.shape[0], n = t.shape[1];
  if (mask && static_cast<int64_t>(mask->size()) != static_cast<int64_t>(m) * n)
    throw std::invalid_argument("softmax_rows: mask size mismatch");
  TensorT<Real> out = make_output(tape, t.shape, t.requires_grad);
  for (int i = 0; i < m; ++i) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < n; ++j)
      if (!mask || (*mask)[static_cast<int64_t>(i) * n + j])
        mx = std::max(mx, t.at(i, j));
    if (mx == -std::numeric_limits<Real>::infinity())
      throw std::invalid_argument("softmax_rows: fully masked row " +
                                  std::to_string(i));
    Real sum = 0;
    for (int j = 0; j < n; ++j) {
      Real e = 0;
      if (!mask || (*mask)[static_cast<int64_t>(i) * n + j])
        e = std::exp(t.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  if (out.requires_grad) {
    tape.record([t, out, m, n]() {
      if (!t.grad) return;
      for (int i = 0; i < m; ++i) {
        Real dot = 0;
        for (int j = 0; j < n; ++j)
          dot += (*out.grad)[static_cast<int64_t>(i) * n + j] * out.at(i, j);
        for (int j = 0; j < n; ++j) {
          const int64_t k = static_cast<int64_t>(i) * n + j;
          (*t.grad)[k] += out.at(i, j) * ((*out.grad)[k] - dot);
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename Real>
TensorT<Real> softmax_rows(Tape<Real>& tape, const TensorT<Real>& t) {
  return detail::softmax_rows_impl(tape, t, nullptr);
}

template <typename Real>
TensorT<Real> masked_softmax_rows(Tape<Real>& tape, const TensorT<Real>& t,
                                  const std::vector<uint8_t>& mask) {
  return detail::softmax_rows_impl(tape, t, &mask);
}

template <typename Real>
TensorT<Real> layer_norm(Tape<Real>& tape, const TensorT<Real>& t,
                         const TensorT<Real>& gain, const TensorT<Real>& bias,
                         Real eps = Real(1e-5)) {
  if (t.rank() != 2 || t.shape[1] < 2)
    throw std::invalid_argument("layer_norm: want rank 2 with >= 2 columns, got " +
                                shape_str(t.shape));
  const int m = t.shape[0], n = t.shape[1];
  if (gain.size() != n || bias.size() != n)
    throw std::invalid_argument("layer_norm: gain/bias size mismatch for " +
                                shape_str(t.shape));
  TensorT<Real> out = detail::make_output(
      tape, t.shape,
      t.requires_grad || gain.requires_grad || bias.requires_grad);
  // keep per-row mean and inverse sigma for the backward pass
  auto xhat = std::make_shared<std::vector<Real>>(t.data->size());
  auto inv_sigma = std::make_shared<std::vector<Real>>(m);
  for (int i = 0; i < m; ++i) {
    Real mean = 0;
    for (int j = 0; j < n; ++j) mean += t.at(i, j);
    mean /= n;
    Real var = 0;
    for (int j = 0; j < n; ++j) {
      Real d = t.at(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const Real is = Real(1) / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (int j = 0; j < n; ++j) {
      const Real xh = (t.at(i, j) - mean) * is;
      (*xhat)[static_cast<int64_t>(i) * n + j] = xh;
      out.at(i, j) = xh * (*gain.data)[j] + (*bias.data)[j];
    }
  }
  if (out.requires_grad) {
    tape.record([t, gain, bias, out, xhat, inv_sigma, m, n]() {
      for (int i = 0; i < m; ++i) {
        const Real* xh = xhat->data() + static_cast<int64_t>(i) * n;
        const Real* dy = out.grad->data() + static_cast<int64_t>(i) * n;
        if (gain.grad)
          for (int j = 0; j < n; ++j) (*gain.grad)[j] += dy[j] * xh[j];
        if (bias.grad)
          for (int j = 0; j < n; ++j) (*bias.grad)[j] += dy[j];
        if (t.grad) {
          Real sum_g = 0, sum_gx = 0;
          for (int j = 0; j < n; ++j) {
            const Real g = dy[j] * (*gain.data)[j];
            sum_g += g;
            sum_gx += g * xh[j];
          }
          const Real is = (*inv_sigma)[i];
          for (int j = 0; j < n; ++j) {
            const Real g = dy[j] * (*gain.data)[j];
            (*t.grad)[static_cast<int64_t>(i) * n + j] +=
                is * (g - sum_g / n - xh[j] * sum_gx / n);
          }
        }
      }
    });
  }
  return out;
}

// tanh-approximation GELU, the activation of the model family being adapted.
template <typename Real>
TensorT<Real> gelu(Tape<Real>& tape, const TensorT<Real>& t) {
  TensorT<Real> out = detail::make_output(tape, t.shape, t.requires_grad);
  const Real c = Real(std::sqrt(2.0 / M_PI));
  const Real k = Real(0.044715);
  for (int64_t i = 0; i < t.size(); ++i) {
    const Real x = (*t.data)[i];
    (*out.data)[i] =
        Real(0.5) * x * (Real(1) + std::tanh(c * (x + k * x * x * x)));
  }
  if (out.requires_grad) {
    tape.record([t, out, c, k]() {
      if (!t.grad) return;
      for (int64_t i = 0; i < t.size(); ++i) {
        const Real x = (*t.data)[i];
        const Real u = c * (x + k * x * x * x);
        const Real th = std::tanh(u);
        const Real sech2 = Real(1) - th * th;
        const Real d = Real(0.5) * (Real(1) + th) +
                       Real(0.5) * x * sech2 * c * (Real(1) + Real(3) * k * x * x);
        (*t.grad)[i] += (*out.grad)[i] * d;
      }
    });
  }
  return out;
}

// Rows of `table` gathered by token id. Grad scatters back additively, so a
// table used several times (tied embeddings) accumulates all paths.
template <typename Real>
TensorT<Real> embedding(Tape<Real>& tape, const TensorT<Real>& table,
                        const std::vector<int>& ids) {
  if (table.rank() != 2)
    throw std::invalid_argument("embedding: table must be rank 2");
  const int v = table.shape[0], d = table.shape[1];
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                  " out of range for table " +
                                  shape_str(table.shape));
  TensorT<Real> out = detail::make_output(
      tape, {static_cast<int>(ids.size()), d}, table.requires_grad);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data->begin() + static_cast<int64_t>(ids[i]) * d,
              table.data->begin() + static_cast<int64_t>(ids[i] + 1) * d,
              out.data->begin() + static_cast<int64_t>(i) * d);
  if (out.requires_grad) {
    tape.record([table, out, ids, d]() {
      if (!table.grad) return;
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          (*table.grad)[static_cast<int64_t>(ids[i]) * d + j] +=
              (*out.grad)[static_cast<int64_t>(i) * d + j];
    });
  }
  return out;
}

// Mean negative log-likelihood over unmasked positions, log-sum-exp
// stabilized. mask, when given, selects the positions that contribute.
template <typename Real>
TensorT<Real> cross_entropy(Tape<Real>& tape, const TensorT<Real>& logits,
                            const std::vector<int>& targets,
                            const std::vector<uint8_t>* mask = nullptr) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy: logits must be rank 2");
  const int t = logits.shape[0], v = logits.shape[1];
  if (static_cast<int>(targets.size()) != t)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(t) + " rows");
  if (mask && static_cast<int>(mask->size()) != t)
    throw std::invalid_argument("cross_entropy: mask length mismatch");
  for (int i = 0; i < t; ++i)
    if (targets[i] < 0 || targets[i] >= v)
      throw std::invalid_argument("cross_entropy: target " +
                                  std::to_string(targets[i]) +
                                  " out of range [0, " + std::to_string(v) + ")");
  int counted = 0;
  for (int i = 0; i < t; ++i)
    if (!mask || (*mask)[i]) counted++;
  if (counted == 0)
    throw std::invalid_argument("cross_entropy: no unmasked positions");

  TensorT<Real> out = detail::make_output(tape, {1}, logits.requires_grad);
  // stash softmax rows for the backward pass
  auto probs = std::make_shared<std::vector<Real>>();
  if (out.requires_grad) probs->resize(logits.data->size());
  Real total = 0;
  std::vector<Real> row(v);
  for (int i = 0; i < t; ++i) {
    const bool use = !mask || (*mask)[i];
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < v; ++j) mx = std::max(mx, logits.at(i, j));
    Real sum = 0;
    for (int j = 0; j < v; ++j) {
      row[j] = std::exp(logits.at(i, j) - mx);
      sum += row[j];
    }
    if (use) total += -(logits.at(i, targets[i]) - mx - std::log(sum));
    if (out.requires_grad)
      for (int j = 0; j < v; ++j)
        (*probs)[static_cast<int64_t>(i) * v + j] = row[j] / sum;
  }
  (*out.data)[0] = total / counted;
  if (out.requires_grad) {
    auto mask_copy = mask ? std::make_shared<std::vector<uint8_t>>(*mask)
                          : std::shared_ptr<std::vector<uint8_t>>();
    tape.record([logits, out, targets, probs, mask_copy, t, v, counted]() {
      if (!logits.grad) return;
      const Real d = (*out.grad)[0] / counted;
      for (int i = 0; i < t; ++i) {
        if (mask_copy && !(*mask_copy)[i]) continue;
        for (int j = 0; j < v; ++j)
          (*logits.grad)[static_cast<int64_t>(i) * v + j] +=
              d * (*probs)[static_cast<int64_t>(i) * v + j];
        (*logits.grad)[static_cast<int64_t>(i) * v + targets[i]] -= d;
      }
    });
  }
  return out;
}

template <typename Real>
TensorT<Real> sum(Tape<Real>& tape, const TensorT<Real>& t) {
  TensorT<Real> out = detail::make_output(tape, {1}, t.requires_grad);
  Real s = 0;
  for (int64_t i = 0; i < t.size(); ++i) s += (*t.data)[i];
  (*out.data)[0] = s;
  if (out.requires_grad) {
    tape.record([t, out]() {
      if (!t.grad) return;
      for (int64_t i = 0; i < t.size(); ++i) (*t.grad)[i] += (*out.grad)[0];
    });
  }
  return out;
}

// sum_i w[i] * xs[i]; w is 1 x n (or length n). Used for layer mixing.
template <typename Real>
TensorT<Real> weighted_sum(Tape<Real>& tape, const TensorT<Real>& w,
                           const std::vector<TensorT<Real>>& xs) {
  if (static_cast<int64_t>(xs.size()) != w.size())
    throw std::invalid_argument("weighted_sum: " + std::to_string(xs.size()) +
                                " tensors for " + std::to_string(w.size()) +
                                " weights");
  if (xs.empty()) throw std::invalid_argument("weighted_sum: empty input");
  bool want = w.requires_grad;
  for (const auto& x : xs) {
    if (x.shape != xs[0].shape)
      throw std::invalid_argument("weighted_sum: shape mismatch");
    want = want || x.requires_grad;
  }
  TensorT<Real> out = detail::make_output(tape, xs[0].shape, want);
  for (size_t k = 0; k < xs.size(); ++k) {
    const Real wk = (*w.data)[k];
    for (int64_t i = 0; i < out.size(); ++i)
      (*out.data)[i] += wk * (*xs[k].data)[i];
  }
  if (out.requires_grad) {
    tape.record([w, xs, out]() {
      for (size_t k = 0; k < xs.size(); ++k) {
        if (xs[k].grad) {
          const Real wk = (*w.data)[k];
          for (int64_t i = 0; i < out.size(); ++i)
            (*xs[k].grad)[i] += wk * (*out.grad)[i];
        }
        if (w.grad) {
          Real dot = 0;
          for (int64_t i = 0; i < out.size(); ++i)
            dot += (*out.grad)[i] * (*xs[k].data)[i];
          (*w.grad)[k] += dot;
        }
      }
    });
  }
  return out;
}

// ---- finite-difference verification ---------------------------------------

// Compares analytic gradients against central differences and returns the
// worst relative error across every element of every input. Finite
// differences are unreliable at 32-bit, so this is double-only.
template <typename Real>
double grad_check(const std::function<TensorT<Real>(Tape<Real>&)>& f,
                  const std::vector<TensorT<Real>*>& inputs, Real eps) {
  static_assert(std::is_same_v<Real, double>,
                "grad_check requires 64-bit precision");
  for (auto* x : inputs) {
    x->set_requires_grad(true);
    x->zero_grad();
  }
  Tape<Real> tape;
  TensorT<Real> loss = f(tape);
  tape.backward(loss);

  Tape<Real> silent;
  silent.recording = false;
  double worst = 0;
  for (auto* x : inputs) {
    for (int64_t i = 0; i < x->size(); ++i) {
      const Real keep = (*x->data)[i];
      (*x->data)[i] = keep + eps;
      const Real fp = f(silent).scalar();
      (*x->data)[i] = keep - eps;
      const Real fm = f(silent).scalar();
      (*x->data)[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = (*x->grad)[i];
      const double scale =
          std::max({std::abs(numeric), std::abs(analytic), 1e-10});
      worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
  }
  return worst;
}

}  // namespace psalab
