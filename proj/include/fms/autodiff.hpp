#pragma once

// Dense reverse-mode differentiation over row-major float64 tensors.
//
// A Tape is recorded once (symbolically) and can be evaluated any number of
// times with different bindings for its named leaves. Values of every node
// are retained after evaluate() so that backward() can run.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fms::ad {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage: vectorized kernels then peel identically on every
// run, which keeps results independent of heap placement.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};
using AlignedVector = std::vector<double, AlignedAllocator<double>>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  AlignedVector& storage() { return data_; }
  const AlignedVector& storage() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  // Scalar value of a one-element tensor.
  double item() const;

  void fill(double v);
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  AlignedVector data_;
};

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(const std::string& what, double jitter)
      : std::runtime_error(what), jitter_(jitter) {}
  // Largest absolute jitter that was tried before giving up.
  double jitter() const { return jitter_; }

 private:
  double jitter_;
};

// Handle to a node on a tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Primitive with a forward and a local backward rule. backward() ACCUMULATES
// into the non-null entries of `grads_in`, which are pre-sized like the inputs.
class Op {
 public:
  virtual ~Op() = default;
  virtual std::string_view name() const = 0;
  virtual Tensor forward(std::span<const Tensor* const> in) = 0;
  virtual void backward(std::span<const Tensor* const> in, const Tensor& out,
                        const Tensor& grad_out, std::span<Tensor* const> grads_in) = 0;
};

// Constant sparse matrix in CSR form, used for neighbour aggregation,
// pooling and row gathers. Entry (r, c) multiplies input row c into output row r.
struct SparseRows {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_begin;  // size rows + 1
  std::vector<std::size_t> col;
  std::vector<double> weight;

  struct Triplet {
    std::size_t row;
    std::size_t col;
    double weight;
  };
  // Duplicate (row, col) entries are kept and summed by the product.
  static SparseRows from_triplets(std::size_t rows, std::size_t cols, std::vector<Triplet> entries);
  static SparseRows gather(std::size_t source_rows, std::span<const std::size_t> index);
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound by name at evaluate().
  Var leaf(std::string name, bool requires_grad = true);
  // Constant bound now; never receives a gradient.
  Var constant(Tensor value);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  // x[n, m] + bias[m] (or x[m] + bias[m]).
  Var affine(Var x, Var bias);
  Var leaky_relu(Var x, double slope = 0.01);
  // Valid-padding, stride-1 cross-correlation.
  //   x[L],         w[k]                 -> [L-k+1]
  //   x[N, Ci, L],  w[Co, Ci, k], b[Co]  -> [N, Co, L-k+1]
  Var conv1d(Var x, Var w);
  Var conv1d(Var x, Var w, Var bias);
  //   x[N, Ci, H, W], w[Co, Ci, k, k], b[Co] -> [N, Co, H-k+1, W-k+1]
  Var conv2d(Var x, Var w, Var bias);
  Var sum(Var x);
  Var sum(Var x, std::vector<std::size_t> axes);
  Var mean(Var x, std::vector<std::size_t> axes);
  Var concat(std::vector<Var> parts, std::size_t axis);
  // D[a, b] = |A_a - B_b|^2 for A[n, d], B[m, d].
  Var sq_dist(Var a, Var b);
  Var exp(Var x);
  Var log(Var x);
  // x * s with s a one-element tensor.
  Var scale(Var x, Var s);
  Var scale(Var x, double c);
  // K + s * I with s a one-element tensor.
  Var add_diag(Var k, Var s);
  // out = S * x for constant sparse S and x[c, d] (or x[c]).
  Var spmm(std::shared_ptr<const SparseRows> s, Var x);
  Var reshape(Var x, Shape shape);
  // Mean softmax cross-entropy of logits[n, c] against integer labels.
  Var softmax_xent(Var logits, std::vector<int> labels);
  // Negative log marginal likelihood of y under N(0, K).
  Var gp_nlml(Var k, Var y);

  Var custom(std::unique_ptr<Op> op, std::vector<Var> inputs);

  // Runs every recorded node in order; the value of the last recorded node
  // is returned.
  const Tensor& evaluate(const std::map<std::string, Tensor>& leaves = {});
  // Reverse sweep from the last recorded node.
  void backward(const Tensor& seed);
  void backward();  // seed of ones; output must be a scalar

  Var output() const;
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const;
  // Gradients of every requires_grad leaf, keyed by leaf name.
  std::map<std::string, Tensor> leaf_grads() const;
  std::vector<std::string> leaf_names() const;
  std::size_t size() const;

 private:
  struct Node;
  Var push(std::unique_ptr<Op> op, std::vector<Var> inputs);
  std::vector<Node> nodes_;
  bool evaluated_ = false;
};

// Jitter policy shared by every Cholesky-based solve: first try the matrix
// as given, then add eps * mean(diag) for eps = 1e-8, 1e-7, ..., 1e-2.
struct Cholesky {
  std::size_t n = 0;
  AlignedVector lower;  // row-major n x n
  double jitter = 0.0;

  static Cholesky factor(std::span<const double> k, std::size_t n);
  std::vector<double> solve(std::span<const double> b) const;
  // Solves L x = b.
  std::vector<double> solve_lower(std::span<const double> b) const;
  double log_det() const;
  std::vector<double> inverse() const;
};

// Value of the NLML with its analytic gradients, outside of any tape.
struct NlmlResult {
  double value = 0.0;
  std::vector<double> grad_k;  // n x n
  std::vector<double> grad_y;  // n
  double jitter = 0.0;
};
NlmlResult gp_nlml_value(std::span<const double> k, std::span<const double> y, std::size_t n);

using ParamSet = std::map<std::string, Tensor>;

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  ParamSet m;
  ParamSet v;

  // One Adam update of every parameter that has a gradient.
  void update(ParamSet& params, const std::map<std::string, Tensor>& grads);
};

}  // namespace fms::ad
