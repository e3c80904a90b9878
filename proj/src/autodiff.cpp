#include "fms/autodiff.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace fms::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                       shape_str(t.shape()));
}

void require_scalar(std::string_view op, const Tensor& t) {
  if (t.size() != 1) shape_fail(op, "expected a one-element tensor, got " + shape_str(t.shape()));
}

CMapMat cmat(const Tensor& t) { return CMapMat(t.data().data(), t.dim(0), t.dim(1)); }
MapMat mmat(Tensor& t) { return MapMat(t.data().data(), t.dim(0), t.dim(1)); }

// ---------------------------------------------------------------------------

class MatMulOp final : public Op {
 public:
  std::string_view name() const override { return "matmul"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    require_rank(name(), a, 2, "lhs");
    require_rank(name(), b, 2, "rhs");
    if (a.dim(1) != b.dim(0))
      shape_fail(name(), "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({a.dim(0), b.dim(1)});
    mmat(out).noalias() = cmat(a) * cmat(b);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0]) mmat(*gin[0]).noalias() += cmat(g) * cmat(*in[1]).transpose();
    if (gin[1]) mmat(*gin[1]).noalias() += cmat(*in[0]).transpose() * cmat(g);
  }
};

class AddOp final : public Op {
 public:
  explicit AddOp(double sign) : sign_(sign) {}
  std::string_view name() const override { return sign_ > 0 ? "add" : "sub"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_same(name(), *in[0], *in[1]);
    Tensor out = *in[0];
    const auto b = in[1]->data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign_ * b[i];
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i];
      if (gin[1]) (*gin[1])[i] += sign_ * g[i];
    }
  }

 private:
  double sign_;
};

class MulOp final : public Op {
 public:
  std::string_view name() const override { return "mul"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_same(name(), *in[0], *in[1]);
    Tensor out = *in[0];
    const auto b = in[1]->data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const auto a = in[0]->data();
    const auto b = in[1]->data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * b[i];
      if (gin[1]) (*gin[1])[i] += g[i] * a[i];
    }
  }
};

class AffineOp final : public Op {
 public:
  std::string_view name() const override { return "affine"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& b = *in[1];
    require_rank(name(), b, 1, "bias");
    const std::size_t m = b.dim(0);
    if (x.rank() < 1 || x.rank() > 2 || x.shape().back() != m)
      shape_fail(name(), "input " + shape_str(x.shape()) + " incompatible with bias " + shape_str(b.shape()));
    Tensor out = x;
    for (std::size_t r = 0; r < out.size(); r += m)
      for (std::size_t c = 0; c < m; ++c) out[r + c] += b[c];
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const std::size_t m = in[1]->dim(0);
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1])
      for (std::size_t r = 0; r < g.size(); r += m)
        for (std::size_t c = 0; c < m; ++c) (*gin[1])[c] += g[r + c];
  }
};

class LeakyReluOp final : public Op {
 public:
  explicit LeakyReluOp(double slope) : slope_(slope) {}
  std::string_view name() const override { return "leaky_relu"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.storage())
      if (v < 0.0) v *= slope_;
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const auto x = in[0]->data();
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += x[i] < 0.0 ? slope_ * g[i] : g[i];
  }

 private:
  double slope_;
};

class Conv1dOp final : public Op {
 public:
  explicit Conv1dOp(bool has_bias) : has_bias_(has_bias) {}
  std::string_view name() const override { return "conv1d"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    if (x.rank() == 1 && w.rank() == 1 && !has_bias_) {
      plain_ = true;
      n_ = 1, ci_ = 1, co_ = 1, len_ = x.dim(0), k_ = w.dim(0);
    } else {
      plain_ = false;
      require_rank(name(), x, 3, "input");
      require_rank(name(), w, 3, "kernel");
      n_ = x.dim(0), ci_ = x.dim(1), len_ = x.dim(2), co_ = w.dim(0), k_ = w.dim(2);
      if (w.dim(1) != ci_)
        shape_fail(name(), "kernel " + shape_str(w.shape()) + " does not match input channels of " +
                               shape_str(x.shape()));
      if (has_bias_ && (in[2]->rank() != 1 || in[2]->dim(0) != co_))
        shape_fail(name(), "bias " + shape_str(in[2]->shape()) + " does not match " + std::to_string(co_) +
                               " output channels");
    }
    if (k_ == 0 || k_ > len_)
      shape_fail(name(), "kernel " + shape_str(w.shape()) + " longer than input " + shape_str(x.shape()));
    const std::size_t lo = len_ - k_ + 1;
    Tensor out(plain_ ? Shape{lo} : Shape{n_, co_, lo});
    for (std::size_t b = 0; b < n_; ++b)
      for (std::size_t o = 0; o < co_; ++o) {
        double* dst = &out[(b * co_ + o) * lo];
        const double bias = has_bias_ ? (*in[2])[o] : 0.0;
        for (std::size_t t = 0; t < lo; ++t) dst[t] = bias;
        for (std::size_t c = 0; c < ci_; ++c) {
          const double* src = &x[(b * ci_ + c) * len_];
          const double* ker = &w[(o * ci_ + c) * k_];
          for (std::size_t t = 0; t < lo; ++t) {
            double acc = 0.0;
            for (std::size_t q = 0; q < k_; ++q) acc += ker[q] * src[t + q];
            dst[t] += acc;
          }
        }
      }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t lo = len_ - k_ + 1;
    for (std::size_t b = 0; b < n_; ++b)
      for (std::size_t o = 0; o < co_; ++o) {
        const double* go = &g[(b * co_ + o) * lo];
        if (has_bias_ && gin[2])
          for (std::size_t t = 0; t < lo; ++t) (*gin[2])[o] += go[t];
        for (std::size_t c = 0; c < ci_; ++c) {
          const std::size_t xoff = (b * ci_ + c) * len_;
          const std::size_t woff = (o * ci_ + c) * k_;
          for (std::size_t t = 0; t < lo; ++t)
            for (std::size_t q = 0; q < k_; ++q) {
              if (gin[0]) (*gin[0])[xoff + t + q] += go[t] * w[woff + q];
              if (gin[1]) (*gin[1])[woff + q] += go[t] * x[xoff + t + q];
            }
        }
      }
  }

 private:
  bool has_bias_;
  bool plain_ = false;
  std::size_t n_ = 0, ci_ = 0, co_ = 0, len_ = 0, k_ = 0;
};

class Conv2dOp final : public Op {
 public:
  std::string_view name() const override { return "conv2d"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const Tensor& b = *in[2];
    require_rank(name(), x, 4, "input");
    require_rank(name(), w, 4, "kernel");
    n_ = x.dim(0), ci_ = x.dim(1), h_ = x.dim(2), w_ = x.dim(3);
    co_ = w.dim(0), k_ = w.dim(2);
    if (w.dim(1) != ci_ || w.dim(3) != k_ || k_ == 0 || k_ > h_ || k_ > w_)
      shape_fail(name(), "kernel " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    if (b.rank() != 1 || b.dim(0) != co_)
      shape_fail(name(), "bias " + shape_str(b.shape()) + " does not match kernel " + shape_str(w.shape()));
    const std::size_t ho = h_ - k_ + 1, wo = w_ - k_ + 1;
    Tensor out({n_, co_, ho, wo});
    for (std::size_t s = 0; s < n_; ++s)
      for (std::size_t o = 0; o < co_; ++o) {
        double* dst = &out[((s * co_ + o) * ho) * wo];
        for (std::size_t i = 0; i < ho * wo; ++i) dst[i] = b[o];
        for (std::size_t c = 0; c < ci_; ++c) {
          const double* src = &x[((s * ci_ + c) * h_) * w_];
          const double* ker = &w[((o * ci_ + c) * k_) * k_];
          for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t q = 0; q < wo; ++q) {
              double acc = 0.0;
              for (std::size_t u = 0; u < k_; ++u)
                for (std::size_t v = 0; v < k_; ++v) acc += ker[u * k_ + v] * src[(r + u) * w_ + q + v];
              dst[r * wo + q] += acc;
            }
        }
      }
    return out;
  }

  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t ho = h_ - k_ + 1, wo = w_ - k_ + 1;
    for (std::size_t s = 0; s < n_; ++s)
      for (std::size_t o = 0; o < co_; ++o) {
        const double* go = &g[((s * co_ + o) * ho) * wo];
        if (gin[2])
          for (std::size_t i = 0; i < ho * wo; ++i) (*gin[2])[o] += go[i];
        for (std::size_t c = 0; c < ci_; ++c) {
          const std::size_t xoff = ((s * ci_ + c) * h_) * w_;
          const std::size_t woff = ((o * ci_ + c) * k_) * k_;
          for (std::size_t r = 0; r < ho; ++r)
            for (std::size_t q = 0; q < wo; ++q) {
              const double gv = go[r * wo + q];
              if (gv == 0.0) continue;
              for (std::size_t u = 0; u < k_; ++u)
                for (std::size_t v = 0; v < k_; ++v) {
                  const std::size_t xi = xoff + (r + u) * w_ + q + v;
                  const std::size_t wi = woff + u * k_ + v;
                  if (gin[0]) (*gin[0])[xi] += gv * w[wi];
                  if (gin[1]) (*gin[1])[wi] += gv * x[xi];
                }
            }
        }
      }
  }

 private:
  std::size_t n_ = 0, ci_ = 0, h_ = 0, w_ = 0, co_ = 0, k_ = 0;
};

// Sum or mean over a set of axes. Reducing every axis yields shape [1].
class ReduceOp final : public Op {
 public:
  ReduceOp(std::vector<std::size_t> axes, bool all, bool mean)
      : axes_(std::move(axes)), all_(all), mean_(mean) {}
  std::string_view name() const override { return mean_ ? "mean" : "sum"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    const Shape& s = x.shape();
    std::vector<bool> reduced(s.size(), all_);
    for (std::size_t a : axes_) {
      if (a >= s.size())
        shape_fail(name(), "axis " + std::to_string(a) + " out of range for " + shape_str(s));
      reduced[a] = true;
    }
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (!reduced[i]) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape = {1};

    // Flat output index for every input element.
    target_.assign(x.size(), 0);
    std::vector<std::size_t> idx(s.size(), 0);
    for (std::size_t flat = 0; flat < x.size(); ++flat) {
      std::size_t o = 0;
      for (std::size_t d = 0; d < s.size(); ++d)
        if (!reduced[d]) o = o * s[d] + idx[d];
      target_[flat] = o;
      for (std::size_t d = s.size(); d-- > 0;) {
        if (++idx[d] < s[d]) break;
        idx[d] = 0;
      }
    }
    Tensor out(out_shape);
    count_ = static_cast<double>(x.size()) / static_cast<double>(out.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[target_[i]] += x[i];
    if (mean_)
      for (double& v : out.storage()) v /= count_;
    return out;
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const double f = mean_ ? 1.0 / count_ : 1.0;
    for (std::size_t i = 0; i < target_.size(); ++i) (*gin[0])[i] += f * g[target_[i]];
  }

 private:
  std::vector<std::size_t> axes_;
  bool all_;
  bool mean_;
  std::vector<std::size_t> target_;
  double count_ = 1.0;
};

class ConcatOp final : public Op {
 public:
  explicit ConcatOp(std::size_t axis) : axis_(axis) {}
  std::string_view name() const override { return "concat"; }

  Tensor forward(std::span<const Tensor* const> in) override {
    const Shape& s0 = in[0]->shape();
    if (axis_ >= s0.size()) shape_fail(name(), "axis out of range for " + shape_str(s0));
    outer_ = 1;
    for (std::size_t d = 0; d < axis_; ++d) outer_ *= s0[d];
    chunks_.clear();
    Shape out_shape = s0;
    out_shape[axis_] = 0;
    for (const Tensor* t : in) {
      const Shape& s = t->shape();
      bool ok = s.size() == s0.size();
      for (std::size_t d = 0; ok && d < s.size(); ++d)
        if (d != axis_ && s[d] != s0[d]) ok = false;
      if (!ok) shape_fail(name(), "cannot join " + shape_str(s) + " with " + shape_str(s0) + " on axis " +
                                      std::to_string(axis_));
      out_shape[axis_] += s[axis_];
      chunks_.push_back(t->size() / outer_);
    }
    Tensor out(out_shape);
    const std::size_t row = out.size() / outer_;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < in.size(); ++p) {
      for (std::size_t o = 0; o < outer_; ++o)
        std::copy_n(&(*in[p])[o * chunks_[p]], chunks_[p], &out[o * row + offset]);
      offset += chunks_[p];
    }
    return out;
  }

  void backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const std::size_t row = out.size() / outer_;
    std::size_t offset = 0;
    for (std::size_t p = 0; p < gin.size(); ++p) {
      if (gin[p])
        for (std::size_t o = 0; o < outer_; ++o)
          for (std::size_t i = 0; i < chunks_[p]; ++i) (*gin[p])[o * chunks_[p] + i] += g[o * row + offset + i];
      offset += chunks_[p];
    }
  }

 private:
  std::size_t axis_;
  std::size_t outer_ = 1;
  std::vector<std::size_t> chunks_;
};

class SqDistOp final : public Op {
 public:
  std::string_view name() const override { return "sq_dist"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    require_rank(name(), a, 2, "lhs");
    require_rank(name(), b, 2, "rhs");
    if (a.dim(1) != b.dim(1))
      shape_fail(name(), "feature widths differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = a.at(i, k) - b.at(j, k);
          acc += diff * diff;
        }
        out.at(i, j) = acc;
      }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double gv = 2.0 * g.at(i, j);
        if (gv == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = a.at(i, k) - b.at(j, k);
          if (gin[0]) gin[0]->at(i, k) += gv * diff;
          if (gin[1]) gin[1]->at(j, k) -= gv * diff;
        }
      }
  }
};

class ExpOp final : public Op {
 public:
  std::string_view name() const override { return "exp"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.storage()) v = std::exp(v);
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * out[i];
  }
};

class LogOp final : public Op {
 public:
  std::string_view name() const override { return "log"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.storage()) v = std::log(v);
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] / (*in[0])[i];
  }
};

class ScaleOp final : public Op {
 public:
  std::string_view name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    require_scalar(name(), *in[1]);
    Tensor out = *in[0];
    const double s = (*in[1])[0];
    for (double& v : out.storage()) v *= s;
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const double s = (*in[1])[0];
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * s;
      acc += g[i] * (*in[0])[i];
    }
    if (gin[1]) (*gin[1])[0] += acc;
  }
};

class ScaleConstOp final : public Op {
 public:
  explicit ScaleConstOp(double c) : c_(c) {}
  std::string_view name() const override { return "scale"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    Tensor out = *in[0];
    for (double& v : out.storage()) v *= c_;
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * c_;
  }

 private:
  double c_;
};

class AddDiagOp final : public Op {
 public:
  std::string_view name() const override { return "add_diag"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& k = *in[0];
    require_rank(name(), k, 2, "matrix");
    if (k.dim(0) != k.dim(1)) shape_fail(name(), "matrix " + shape_str(k.shape()) + " is not square");
    require_scalar(name(), *in[1]);
    Tensor out = k;
    for (std::size_t i = 0; i < k.dim(0); ++i) out.at(i, i) += (*in[1])[0];
    return out;
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
    if (gin[1])
      for (std::size_t i = 0; i < g.dim(0); ++i) (*gin[1])[0] += g.at(i, i);
  }
};

class SpmmOp final : public Op {
 public:
  explicit SpmmOp(std::shared_ptr<const SparseRows> s) : s_(std::move(s)) {}
  std::string_view name() const override { return "spmm"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& x = *in[0];
    if (x.rank() < 1 || x.rank() > 2 || x.dim(0) != s_->cols)
      shape_fail(name(), "sparse operand has " + std::to_string(s_->cols) + " columns, dense operand is " +
                             shape_str(x.shape()));
    const std::size_t d = x.rank() == 2 ? x.dim(1) : 1;
    Tensor out(x.rank() == 2 ? Shape{s_->rows, d} : Shape{s_->rows});
    for (std::size_t r = 0; r < s_->rows; ++r) {
      double* dst = &out[r * d];
      for (std::size_t e = s_->row_begin[r]; e < s_->row_begin[r + 1]; ++e) {
        const double w = s_->weight[e];
        const double* src = &x[s_->col[e] * d];
        for (std::size_t k = 0; k < d; ++k) dst[k] += w * src[k];
      }
    }
    return out;
  }
  void backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const std::size_t d = in[0]->rank() == 2 ? in[0]->dim(1) : 1;
    for (std::size_t r = 0; r < s_->rows; ++r) {
      const double* src = &g[r * d];
      for (std::size_t e = s_->row_begin[r]; e < s_->row_begin[r + 1]; ++e) {
        const double w = s_->weight[e];
        double* dst = &(*gin[0])[s_->col[e] * d];
        for (std::size_t k = 0; k < d; ++k) dst[k] += w * src[k];
      }
    }
  }

 private:
  std::shared_ptr<const SparseRows> s_;
};

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view name() const override { return "reshape"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    if (shape_size(shape_) != in[0]->size())
      shape_fail(name(), "cannot view " + shape_str(in[0]->shape()) + " as " + shape_str(shape_));
    return in[0]->reshaped(shape_);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  }

 private:
  Shape shape_;
};

class SoftmaxXentOp final : public Op {
 public:
  explicit SoftmaxXentOp(std::vector<int> labels) : labels_(std::move(labels)) {}
  std::string_view name() const override { return "softmax_xent"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& z = *in[0];
    require_rank(name(), z, 2, "logits");
    const std::size_t n = z.dim(0), c = z.dim(1);
    if (labels_.size() != n)
      shape_fail(name(), std::to_string(labels_.size()) + " labels for logits " + shape_str(z.shape()));
    prob_ = Tensor({n, c});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = z.at(i, 0);
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z.at(i, j));
      double norm = 0.0;
      for (std::size_t j = 0; j < c; ++j) norm += std::exp(z.at(i, j) - mx);
      for (std::size_t j = 0; j < c; ++j) prob_.at(i, j) = std::exp(z.at(i, j) - mx) / norm;
      const auto y = static_cast<std::size_t>(labels_[i]);
      loss += -(z.at(i, y) - mx - std::log(norm));
    }
    return Tensor::scalar(loss / static_cast<double>(n));
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    if (!gin[0]) return;
    const std::size_t n = prob_.dim(0), c = prob_.dim(1);
    const double f = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        const double target = static_cast<std::size_t>(labels_[i]) == j ? 1.0 : 0.0;
        gin[0]->at(i, j) += f * (prob_.at(i, j) - target);
      }
  }

 private:
  std::vector<int> labels_;
  Tensor prob_;
};

class GpNlmlOp final : public Op {
 public:
  std::string_view name() const override { return "gp_nlml"; }
  Tensor forward(std::span<const Tensor* const> in) override {
    const Tensor& k = *in[0];
    const Tensor& y = *in[1];
    require_rank(name(), k, 2, "kernel matrix");
    if (k.dim(0) != k.dim(1)) shape_fail(name(), "kernel matrix " + shape_str(k.shape()) + " is not square");
    if (y.rank() != 1 || y.dim(0) != k.dim(0))
      shape_fail(name(), "targets " + shape_str(y.shape()) + " do not match kernel " + shape_str(k.shape()));
    result_ = gp_nlml_value(k.data(), y.data(), k.dim(0));
    return Tensor::scalar(result_.value);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& g,
                std::span<Tensor* const> gin) override {
    const double s = g[0];
    if (gin[0])
      for (std::size_t i = 0; i < result_.grad_k.size(); ++i) (*gin[0])[i] += s * result_.grad_k[i];
    if (gin[1])
      for (std::size_t i = 0; i < result_.grad_y.size(); ++i) (*gin[1])[i] += s * result_.grad_y[i];
  }

 private:
  NlmlResult result_;
};

}  // namespace

// ---------------------------------------------------------------------------

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (std::size_t d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  for (std::size_t d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  if (data_.size() != shape_size(shape_))
    throw ShapeError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(data_.size()) + " values");
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

SparseRows SparseRows::from_triplets(std::size_t rows, std::size_t cols, std::vector<Triplet> entries) {
  std::stable_sort(entries.begin(), entries.end(), [](const Triplet& a, const Triplet& b) { return a.row < b.row; });
  SparseRows s;
  s.rows = rows;
  s.cols = cols;
  s.row_begin.assign(rows + 1, 0);
  s.col.reserve(entries.size());
  s.weight.reserve(entries.size());
  for (const Triplet& t : entries) {
    if (t.row >= rows || t.col >= cols) throw ShapeError("sparse entry out of range");
    ++s.row_begin[t.row + 1];
    s.col.push_back(t.col);
    s.weight.push_back(t.weight);
  }
  for (std::size_t r = 0; r < rows; ++r) s.row_begin[r + 1] += s.row_begin[r];
  return s;
}

SparseRows SparseRows::gather(std::size_t source_rows, std::span<const std::size_t> index) {
  std::vector<Triplet> t;
  t.reserve(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) t.push_back({r, index[r], 1.0});
  return from_triplets(index.size(), source_rows, std::move(t));
}

// ---------------------------------------------------------------------------

struct Tape::Node {
  enum class Kind { kLeaf, kConstant, kOp };
  Kind kind = Kind::kOp;
  std::string name;
  std::unique_ptr<Op> op;
  std::vector<std::uint32_t> inputs;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
};

Tape::Tape() = default;
Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

Var Tape::leaf(std::string name, bool requires_grad) {
  Node n;
  n.kind = Node::Kind::kLeaf;
  n.name = std::move(name);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.kind = Node::Kind::kConstant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::push(std::unique_ptr<Op> op, std::vector<Var> inputs) {
  Node n;
  n.op = std::move(op);
  for (Var v : inputs) {
    if (!v.valid() || v.id >= nodes_.size())
      throw std::invalid_argument(std::string(n.op->name()) + ": input does not belong to this tape");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::matmul(Var a, Var b) { return push(std::make_unique<MatMulOp>(), {a, b}); }
Var Tape::add(Var a, Var b) { return push(std::make_unique<AddOp>(1.0), {a, b}); }
Var Tape::sub(Var a, Var b) { return push(std::make_unique<AddOp>(-1.0), {a, b}); }
Var Tape::mul(Var a, Var b) { return push(std::make_unique<MulOp>(), {a, b}); }
Var Tape::affine(Var x, Var bias) { return push(std::make_unique<AffineOp>(), {x, bias}); }
Var Tape::leaky_relu(Var x, double slope) { return push(std::make_unique<LeakyReluOp>(slope), {x}); }
Var Tape::conv1d(Var x, Var w) { return push(std::make_unique<Conv1dOp>(false), {x, w}); }
Var Tape::conv1d(Var x, Var w, Var bias) { return push(std::make_unique<Conv1dOp>(true), {x, w, bias}); }
Var Tape::conv2d(Var x, Var w, Var bias) { return push(std::make_unique<Conv2dOp>(), {x, w, bias}); }
Var Tape::sum(Var x) { return push(std::make_unique<ReduceOp>(std::vector<std::size_t>{}, true, false), {x}); }
Var Tape::sum(Var x, std::vector<std::size_t> axes) {
  return push(std::make_unique<ReduceOp>(std::move(axes), false, false), {x});
}
Var Tape::mean(Var x, std::vector<std::size_t> axes) {
  return push(std::make_unique<ReduceOp>(std::move(axes), false, true), {x});
}
Var Tape::concat(std::vector<Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  return push(std::make_unique<ConcatOp>(axis), std::move(parts));
}
Var Tape::sq_dist(Var a, Var b) { return push(std::make_unique<SqDistOp>(), {a, b}); }
Var Tape::exp(Var x) { return push(std::make_unique<ExpOp>(), {x}); }
Var Tape::log(Var x) { return push(std::make_unique<LogOp>(), {x}); }
Var Tape::scale(Var x, Var s) { return push(std::make_unique<ScaleOp>(), {x, s}); }
Var Tape::scale(Var x, double c) { return push(std::make_unique<ScaleConstOp>(c), {x}); }
Var Tape::add_diag(Var k, Var s) { return push(std::make_unique<AddDiagOp>(), {k, s}); }
Var Tape::spmm(std::shared_ptr<const SparseRows> s, Var x) { return push(std::make_unique<SpmmOp>(std::move(s)), {x}); }
Var Tape::reshape(Var x, Shape shape) { return push(std::make_unique<ReshapeOp>(std::move(shape)), {x}); }
Var Tape::softmax_xent(Var logits, std::vector<int> labels) {
  return push(std::make_unique<SoftmaxXentOp>(std::move(labels)), {logits});
}
Var Tape::gp_nlml(Var k, Var y) { return push(std::make_unique<GpNlmlOp>(), {k, y}); }
Var Tape::custom(std::unique_ptr<Op> op, std::vector<Var> inputs) { return push(std::move(op), std::move(inputs)); }

const Tensor& Tape::evaluate(const std::map<std::string, Tensor>& leaves) {
  if (nodes_.empty()) throw std::logic_error("evaluate: empty tape");
  std::vector<const Tensor*> in;
  for (Node& n : nodes_) {
    switch (n.kind) {
      case Node::Kind::kConstant:
        break;
      case Node::Kind::kLeaf: {
        auto it = leaves.find(n.name);
        if (it == leaves.end()) throw std::invalid_argument("evaluate: leaf '" + n.name + "' not supplied");
        n.value = it->second;
        break;
      }
      case Node::Kind::kOp:
        in.clear();
        for (std::uint32_t i : n.inputs) in.push_back(&nodes_[i].value);
        n.value = n.op->forward(in);
        break;
    }
  }
  evaluated_ = true;
  return nodes_.back().value;
}

void Tape::backward(const Tensor& seed) {
  if (!evaluated_) throw std::logic_error("backward: tape has not been evaluated");
  Node& out = nodes_.back();
  if (seed.shape() != out.value.shape())
    throw ShapeError("backward: seed " + shape_str(seed.shape()) + " does not match output " +
                     shape_str(out.value.shape()));
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      if (n.grad.shape() == n.value.shape())
        n.grad.fill(0.0);
      else
        n.grad = Tensor(n.value.shape());
    } else {
      n.grad = Tensor();
    }
  }
  if (!out.requires_grad) return;
  out.grad = seed;
  std::vector<const Tensor*> in;
  std::vector<Tensor*> gin;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.kind != Node::Kind::kOp || !n.requires_grad) continue;
    in.clear();
    gin.clear();
    for (std::uint32_t j : n.inputs) {
      in.push_back(&nodes_[j].value);
      gin.push_back(nodes_[j].requires_grad ? &nodes_[j].grad : nullptr);
    }
    n.op->backward(in, n.value, n.grad, gin);
  }
}

void Tape::backward() {
  if (!evaluated_) throw std::logic_error("backward: tape has not been evaluated");
  const Tensor& out = nodes_.back().value;
  if (out.size() != 1) throw ShapeError("backward: implicit seed needs a scalar output, got " + shape_str(out.shape()));
  backward(Tensor(out.shape(), 1.0));
}

Var Tape::output() const {
  if (nodes_.empty()) throw std::logic_error("output: empty tape");
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
  if (!evaluated_ && nodes_.at(v.id).kind != Node::Kind::kConstant)
    throw std::logic_error("value: tape has not been evaluated");
  return nodes_.at(v.id).value;
}

const Tensor& Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.requires_grad || n.grad.empty()) throw std::logic_error("grad: node has no gradient");
  return n.grad;
}

bool Tape::has_grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.requires_grad && !n.grad.empty();
}

std::map<std::string, Tensor> Tape::leaf_grads() const {
  std::map<std::string, Tensor> out;
  for (const Node& n : nodes_)
    if (n.kind == Node::Kind::kLeaf && n.requires_grad && !n.grad.empty()) {
      auto [it, fresh] = out.emplace(n.name, n.grad);
      if (!fresh)
        for (std::size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
    }
  return out;
}

std::vector<std::string> Tape::leaf_names() const {
  std::vector<std::string> out;
  for (const Node& n : nodes_)
    if (n.kind == Node::Kind::kLeaf) out.push_back(n.name);
  return out;
}

std::size_t Tape::size() const { return nodes_.size(); }

// ---------------------------------------------------------------------------

Cholesky Cholesky::factor(std::span<const double> k, std::size_t n) {
  if (k.size() != n * n) throw ShapeError("cholesky: expected " + std::to_string(n * n) + " entries");
  const CMapMat km(k.data(), n, n);
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += km(i, i);
  mean_diag = n ? mean_diag / static_cast<double>(n) : 0.0;
  const double base = std::abs(mean_diag) > 0.0 ? std::abs(mean_diag) : 1.0;

  double jitter = 0.0;
  for (int attempt = 0; attempt <= 7; ++attempt) {
    if (attempt > 0) jitter = base * std::pow(10.0, -9 + attempt);  // 1e-8 .. 1e-2
    RowMat a = km;
    a.diagonal().array() += jitter;
    Eigen::LLT<RowMat> llt(a);
    if (llt.info() != Eigen::Success) continue;
    RowMat l = llt.matrixL();
    bool ok = l.allFinite();
    for (std::size_t i = 0; i < n; ++i)
      if (!(l(i, i) > 0.0)) ok = false;
    if (!ok) continue;
    Cholesky c;
    c.n = n;
    c.jitter = jitter;
    c.lower.assign(l.data(), l.data() + n * n);
    return c;
  }
  std::ostringstream os;
  os << "kernel not positive definite (jitter up to " << jitter << ")";
  throw NotPositiveDefinite(os.str(), jitter);
}

std::vector<double> Cholesky::solve(std::span<const double> b) const {
  const CMapMat l(lower.data(), n, n);
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(b.data(), n);
  l.triangularView<Eigen::Lower>().solveInPlace(x);
  l.transpose().triangularView<Eigen::Upper>().solveInPlace(x);
  return {x.data(), x.data() + n};
}

std::vector<double> Cholesky::solve_lower(std::span<const double> b) const {
  const CMapMat l(lower.data(), n, n);
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(b.data(), n);
  l.triangularView<Eigen::Lower>().solveInPlace(x);
  return {x.data(), x.data() + n};
}

double Cholesky::log_det() const {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::log(lower[i * n + i]);
  return 2.0 * s;
}

std::vector<double> Cholesky::inverse() const {
  const CMapMat l(lower.data(), n, n);
  RowMat linv = RowMat::Identity(n, n);
  l.triangularView<Eigen::Lower>().solveInPlace(linv);
  RowMat inv = linv.transpose() * linv;
  return {inv.data(), inv.data() + n * n};
}

NlmlResult gp_nlml_value(std::span<const double> k, std::span<const double> y, std::size_t n) {
  if (k.size() != n * n || y.size() != n) throw ShapeError("gp_nlml: inconsistent sizes");
  // Only the symmetric part of K enters the likelihood.
  std::vector<double> sym(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = 0.5 * (k[i * n + j] + k[j * n + i]);
  const Cholesky chol = Cholesky::factor(sym, n);
  NlmlResult r;
  r.jitter = chol.jitter;
  r.grad_y = chol.solve(y);  // alpha
  double fit = 0.0;
  for (std::size_t i = 0; i < n; ++i) fit += y[i] * r.grad_y[i];
  r.value = 0.5 * fit + 0.5 * chol.log_det() + 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  r.grad_k = chol.inverse();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      r.grad_k[i * n + j] = 0.5 * (r.grad_k[i * n + j] - r.grad_y[i] * r.grad_y[j]);
  return r;
}

void AdamState::update(ParamSet& params, const std::map<std::string, Tensor>& grads) {
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    if (g->second.shape() != p.shape())
      throw ShapeError("adam: gradient for '" + name + "' has shape " + shape_str(g->second.shape()) +
                       ", parameter has " + shape_str(p.shape()));
    auto [mi, mfresh] = m.try_emplace(name, p.shape());
    auto [vi, vfresh] = v.try_emplace(name, p.shape());
    Tensor& mt = mi->second;
    Tensor& vt = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g->second[i];
      mt[i] = beta1 * mt[i] + (1.0 - beta1) * gi;
      vt[i] = beta2 * vt[i] + (1.0 - beta2) * gi * gi;
      const double mhat = mt[i] / c1;
      const double vhat = vt[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace fms::ad
