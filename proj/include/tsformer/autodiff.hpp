#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace tsf::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the node receives a gradient
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into the inputs' grad buffers.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

/// Dense row-major array taking part in a reverse-mode gradient graph.
/// Copies share the same node.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor constant(Shape shape, T fill);
  /// Leaf that accumulates a gradient.
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor scalar(T v) { return constant({}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  std::span<const T> values() const { return node_->value; }
  /// Mutable access is only granted for leaves; the finite-difference
  /// tooling perturbs parameters in place.
  std::span<T> leaf_values();
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros when nothing has been accumulated.
  std::vector<T> grad() const;
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates a result node wired to `inputs`; `backward` is attached only when
/// some input requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward);

/// Populates gradients of every requires_grad leaf reachable from the scalar
/// `loss`. The graph is released afterwards; a second call throws.
template <typename T>
void backward(const Tensor<T>& loss);

/// Seeded variant for several (possibly non-scalar) outputs at once.
template <typename T>
void backward(std::span<const std::pair<Tensor<T>, std::vector<T>>> seeds);

// ---------------------------------------------------------------------------
// Primitives. Shapes must match exactly; the only implicit expansion is a
// scalar factor in mul_scalar/add_scalar. Bias-style row expansion is the
// explicit add_rowwise.

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
/// Product with a constant mask; the mask never receives a gradient.
template <typename T> Tensor<T> mask_mul(const Tensor<T>& a, std::span<const T> mask);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
/// x[..., m] + bias[m] on every row.
template <typename T> Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// (n, m) -> (n)
template <typename T> Tensor<T> row_sum(const Tensor<T>& a);
/// (n, n) -> (n)
template <typename T> Tensor<T> diag(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
/// Columns [begin, end) of a 2-D tensor.
template <typename T> Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end);
/// Rows [begin, end) along the first dimension.
template <typename T> Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end);
/// Concatenation along the last dimension; leading dimensions must agree.
template <typename T> Tensor<T> concat_last_dim(std::span<const Tensor<T>> parts);
/// Concatenation along the first dimension.
template <typename T> Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
/// Row-wise softmax over the last dimension with max subtraction.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax_rows(const Tensor<T>& x);
/// Normalizes each vector over the last dimension, then applies gain and bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
/// Valid cross-correlation of a 2-D input (n, d) with K kernels (K, kh, kw).
template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride_h,
                       std::size_t stride_w);
/// Cosine similarity of two equal-length vectors (scalar result).
template <typename T> Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v);
/// Each row scaled to unit L2 norm; zero-norm rows are rejected.
template <typename T> Tensor<T> normalize_rows(const Tensor<T>& x);

}  // namespace tsf::ad
