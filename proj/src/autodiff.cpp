#include "tsformer/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "tsformer/error.hpp"

namespace tsf::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
void require_finite(const Tensor<T>& a, const char* op) {
  for (T v : a.values()) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite input");
  }
}

// Accumulates into input i if it takes part in differentiation.
template <typename T, typename F>
void accumulate(Node<T>& self, std::size_t i, F&& f) {
  Node<T>& in = *self.inputs[i];
  if (!in.requires_grad) return;
  f(in.ensure_grad());
}

// Last-dimension view: rows x cols.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const Tensor<T>& x) {
  require(x.rank() >= 1, "expected at least a 1-D tensor");
  const std::size_t cols = x.shape().back();
  return {cols == 0 ? 0 : x.size() / cols, cols};
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match buffer of " +
                     std::to_string(values.size()));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return from_node(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, T fill) {
  const std::size_t n = numel(shape);
  return constant(std::move(shape), std::vector<T>(n, fill));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
std::span<T> Tensor<T>::leaf_values() {
  if (!node_->is_leaf) throw Error("leaf_values() on a non-leaf tensor");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  require(index.size() == rank(), "at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    require(i < node_->shape[k], "at(): index out of range");
    flat = flat * node_->shape[k] + i;
    ++k;
  }
  return node_->value[flat];
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(size(), T{0});
  return node_->grad;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  for (const Tensor<T>& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (const Tensor<T>& in : inputs) n->inputs.push_back(in.node());
    n->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(n));
}

template <typename T>
void backward(std::span<const std::pair<Tensor<T>, std::vector<T>>> seeds) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  // Iterative post-order DFS yields a topological order (inputs first).
  for (const auto& [root, seed] : seeds) {
    Node<T>* r = root.node().get();
    if (r->released) throw Error("backward() called twice on the same graph");
    if (!r->requires_grad) throw Error("backward(): output does not depend on any parameter");
    if (seed.size() != r->value.size()) throw ShapeError("backward(): seed size mismatch");
    if (visited.contains(r)) continue;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{r, 0}};
    visited.insert(r);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && !child->is_leaf && !visited.contains(child)) {
          if (child->released) throw Error("backward() through a released graph");
          visited.insert(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  for (const auto& [root, seed] : seeds) {
    auto& g = root.node()->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }

  std::unordered_set<Node<T>*> roots;
  for (const auto& s : seeds) roots.insert(s.first.node().get());
  for (Node<T>* n : order) {
    n->backward = nullptr;
    n->inputs.clear();
    n->released = true;
    if (!roots.contains(n)) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  const std::pair<Tensor<T>, std::vector<T>> seed{loss, std::vector<T>{T{1}}};
  backward<T>(std::span<const std::pair<Tensor<T>, std::vector<T>>>(&seed, 1));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be 2-D");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  std::vector<T> out(m * p);
  MapM<T>(out.data(), m, p).noalias() =
      MapC<T>(a.values().data(), m, k) * MapC<T>(b.values().data(), k, p);
  return make_result<T>({m, p}, std::move(out), {a, b}, [m, k, p](Node<T>& self) {
    const MapC<T> g(self.grad.data(), m, p);
    accumulate(self, 0, [&](std::vector<T>& ga) {
      MapM<T>(ga.data(), m, k).noalias() +=
          g * MapC<T>(self.inputs[1]->value.data(), k, p).transpose();
    });
    accumulate(self, 1, [&](std::vector<T>& gb) {
      MapM<T>(gb.data(), k, p).noalias() +=
          MapC<T>(self.inputs[0]->value.data(), m, k).transpose() * g;
    });
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t j = 0; j < 2; ++j) {
      accumulate(self, j, [&](std::vector<T>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(self, 1, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    });
    accumulate(self, 1, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    });
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / bv[i];
    });
    accumulate(self, 1, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * av[i] / (bv[i] * bv[i]);
    });
  });
}

template <typename T>
Tensor<T> mask_mul(const Tensor<T>& a, std::span<const T> mask) {
  if (mask.size() != a.size()) throw ShapeError("mask_mul: mask size mismatch");
  std::vector<T> m(mask.begin(), mask.end());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * m[i];
  return make_result<T>(a.shape(), std::move(out), {a}, [m = std::move(m)](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * m[i];
    });
  });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + s;
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias) {
  const auto [rows, cols] = rows_cols(x);
  if (bias.rank() != 1 || bias.dim(0) != cols) {
    throw ShapeError("add_rowwise: bias " + to_string(bias.shape()) + " vs input " +
                     to_string(x.shape()));
  }
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = x.values()[r * cols + c] + bias.values()[c];
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [rows, cols](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(self, 1, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad[r * cols + c];
    });
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
    });
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.values()[i] > T{0})) throw NumericalError("log: non-positive input");
    out[i] = std::log(a.values()[i]);
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    const auto& av = self.inputs[0]->value;
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / av[i];
    });
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T{1} / std::sqrt(T{2});
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.values()[i];
    out[i] = T{0.5} * x * (T{1} + std::erf(x * inv_sqrt2));
  }
  return make_result<T>(a.shape(), std::move(out), {a}, [inv_sqrt2](Node<T>& self) {
    const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * std::numbers::pi_v<T>);
    const auto& av = self.inputs[0]->value;
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = av[i];
        const T cdf = T{0.5} * (T{1} + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * x * x);
        g[i] += self.grad[i] * (cdf + x * pdf);
      }
    });
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s{0};
  for (T v : a.values()) s += v;
  return make_result<T>({}, {s}, {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (T& v : g) v += self.grad[0];
    });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.size() > 0, "mean of an empty tensor");
  return mul_scalar(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> row_sum(const Tensor<T>& a) {
  require(a.rank() == 2, "row_sum: expected a 2-D tensor");
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<T> out(n, T{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r] += a.values()[r * m + c];
  return make_result<T>({n}, std::move(out), {a}, [n, m](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) g[r * m + c] += self.grad[r];
    });
  });
}

template <typename T>
Tensor<T> diag(const Tensor<T>& a) {
  require(a.rank() == 2 && a.dim(0) == a.dim(1), "diag: expected a square matrix");
  const std::size_t n = a.dim(0);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i * n + i];
  return make_result<T>({n}, std::move(out), {a}, [n](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < n; ++i) g[i * n + i] += self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  return make_result<T>(std::move(shape), std::move(out), {a}, [](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require(a.rank() == 2, "transpose: expected a 2-D tensor");
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<T> out(n * m);
  MapM<T>(out.data(), m, n) = MapC<T>(a.values().data(), n, m).transpose();
  return make_result<T>({m, n}, std::move(out), {a}, [n, m](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      MapM<T>(g.data(), n, m) += MapC<T>(self.grad.data(), m, n).transpose();
    });
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  require(a.rank() == 2, "slice_cols: expected a 2-D tensor");
  require(begin < end && end <= a.dim(1), "slice_cols: bad column range");
  const std::size_t n = a.dim(0), m = a.dim(1), w = end - begin;
  std::vector<T> out(n * w);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(a.values().data() + r * m + begin, w, out.data() + r * w);
  return make_result<T>({n, w}, std::move(out), {a}, [n, m, w, begin](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < w; ++c) g[r * m + begin + c] += self.grad[r * w + c];
    });
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  require(a.rank() >= 1, "slice_rows: expected at least a 1-D tensor");
  require(begin < end && end <= a.dim(0), "slice_rows: bad row range");
  const std::size_t stride = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                     a.values().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return make_result<T>(std::move(shape), std::move(out), {a}, [begin, stride](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * stride + i] += self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> concat_last_dim(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), "concat_last_dim: no inputs");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  const std::size_t rows = numel(lead);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor<T>& p : parts) {
    require(p.rank() == lead.size() + 1 &&
                std::equal(lead.begin(), lead.end(), p.shape().begin()),
            "concat_last_dim: leading dimensions differ");
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  std::vector<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].values().data() + r * widths[k], widths[k],
                  out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result<T>(std::move(shape), std::move(out),
                        std::vector<Tensor<T>>(parts.begin(), parts.end()),
                        [rows, total, widths](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < widths.size(); ++k) {
                            accumulate(self, k, [&](std::vector<T>& g) {
                              for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t c = 0; c < widths[k]; ++c)
                                  g[r * widths[k] + c] += self.grad[r * total + off + c];
                            });
                            off += widths[k];
                          }
                        });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  std::vector<T> out;
  for (const Tensor<T>& p : parts) {
    require(p.rank() == tail.size() + 1 &&
                std::equal(tail.begin(), tail.end(), p.shape().begin() + 1),
            "concat_rows: trailing dimensions differ");
    rows += p.dim(0);
    sizes.push_back(p.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result<T>(std::move(shape), std::move(out),
                        std::vector<Tensor<T>>(parts.begin(), parts.end()),
                        [sizes](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < sizes.size(); ++k) {
                            accumulate(self, k, [&](std::vector<T>& g) {
                              for (std::size_t i = 0; i < sizes[k]; ++i)
                                g[i] += self.grad[off + i];
                            });
                            off += sizes[k];
                          }
                        });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_finite(x, "softmax_rows");
  const auto [rows, cols] = rows_cols(x);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T s{0};
    for (std::size_t c = 0; c < cols; ++c) s += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= s;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * cols;
        const T* gy = self.grad.data() + r * cols;
        T dot{0};
        for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (gy[c] - dot);
      }
    });
  });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  require_finite(x, "log_softmax_rows");
  const auto [rows, cols] = rows_cols(x);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T s{0};
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(in[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lse;
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [rows, cols](Node<T>& self) {
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * cols;
        const T* gy = self.grad.data() + r * cols;
        T gs{0};
        for (std::size_t c = 0; c < cols; ++c) gs += gy[c];
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += gy[c] - std::exp(y[c]) * gs;
      }
    });
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const auto [rows, d] = rows_cols(x);
  if (d == 0) throw ShapeError("layernorm: last dimension is zero");
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("layernorm: gain/bias must have length " + std::to_string(d));
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.values().data() + r * d;
    T mu{0};
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<T>(d);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gain.values()[c] + bias.values()[c];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gmv = self.inputs[1]->value;
        accumulate(self, 0, [&](std::vector<T>& g) {
          std::vector<T> gx(d);
          for (std::size_t r = 0; r < rows; ++r) {
            T m1{0}, m2{0};
            for (std::size_t c = 0; c < d; ++c) {
              gx[c] = self.grad[r * d + c] * gmv[c];
              m1 += gx[c];
              m2 += gx[c] * xhat[r * d + c];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            for (std::size_t c = 0; c < d; ++c)
              g[r * d + c] += inv_std[r] * (gx[c] - m1 - xhat[r * d + c] * m2);
          }
        });
        accumulate(self, 1, [&](std::vector<T>& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c] * xhat[r * d + c];
        });
        accumulate(self, 2, [&](std::vector<T>& g) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
        });
      });
}

template <typename T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride_h,
                       std::size_t stride_w) {
  require(x.rank() == 2, "conv2d_valid: input must be 2-D");
  require(kernels.rank() == 3, "conv2d_valid: kernels must be (K, kh, kw)");
  require(stride_h > 0 && stride_w > 0, "conv2d_valid: strides must be positive");
  const std::size_t n = x.dim(0), d = x.dim(1);
  const std::size_t nk = kernels.dim(0), kh = kernels.dim(1), kw = kernels.dim(2);
  if (kh > n || kw > d) {
    throw ShapeError("conv2d_valid: kernel " + to_string(kernels.shape()) +
                     " larger than input " + to_string(x.shape()));
  }
  const std::size_t oh = (n - kh) / stride_h + 1;
  const std::size_t ow = (d - kw) / stride_w + 1;
  std::vector<T> out(nk * oh * ow, T{0});
  const T* xv = x.values().data();
  const T* wv = kernels.values().data();
  for (std::size_t k = 0; k < nk; ++k)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T acc{0};
        for (std::size_t a = 0; a < kh; ++a)
          for (std::size_t b = 0; b < kw; ++b)
            acc += xv[(i * stride_h + a) * d + j * stride_w + b] * wv[(k * kh + a) * kw + b];
        out[(k * oh + i) * ow + j] = acc;
      }
  return make_result<T>(
      {nk, oh, ow}, std::move(out), {x, kernels},
      [=](Node<T>& self) {
        const auto& xin = self.inputs[0]->value;
        const auto& win = self.inputs[1]->value;
        accumulate(self, 0, [&](std::vector<T>& g) {
          for (std::size_t k = 0; k < nk; ++k)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const T go = self.grad[(k * oh + i) * ow + j];
                for (std::size_t a = 0; a < kh; ++a)
                  for (std::size_t b = 0; b < kw; ++b)
                    g[(i * stride_h + a) * d + j * stride_w + b] += go * win[(k * kh + a) * kw + b];
              }
        });
        accumulate(self, 1, [&](std::vector<T>& g) {
          for (std::size_t k = 0; k < nk; ++k)
            for (std::size_t i = 0; i < oh; ++i)
              for (std::size_t j = 0; j < ow; ++j) {
                const T go = self.grad[(k * oh + i) * ow + j];
                for (std::size_t a = 0; a < kh; ++a)
                  for (std::size_t b = 0; b < kw; ++b)
                    g[(k * kh + a) * kw + b] += go * xin[(i * stride_h + a) * d + j * stride_w + b];
              }
        });
      });
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& u, const Tensor<T>& v) {
  require(u.rank() == 1, "cosine_similarity: expected vectors");
  require_same_shape(u, v, "cosine_similarity");
  T uu{0}, vv{0}, uv{0};
  for (std::size_t i = 0; i < u.size(); ++i) {
    uu += u.values()[i] * u.values()[i];
    vv += v.values()[i] * v.values()[i];
    uv += u.values()[i] * v.values()[i];
  }
  if (!(uu > T{0}) || !(vv > T{0})) throw NumericalError("cosine_similarity: zero-norm vector");
  const T nu = std::sqrt(uu), nv = std::sqrt(vv);
  const T s = uv / (nu * nv);
  return make_result<T>({}, {s}, {u, v}, [nu, nv, s](Node<T>& self) {
    const auto& uval = self.inputs[0]->value;
    const auto& vval = self.inputs[1]->value;
    const T g0 = self.grad[0];
    accumulate(self, 0, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (vval[i] / (nu * nv) - s * uval[i] / (nu * nu));
    });
    accumulate(self, 1, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += g0 * (uval[i] / (nu * nv) - s * vval[i] / (nv * nv));
    });
  });
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x) {
  const auto [rows, cols] = rows_cols(x);
  std::vector<T> norms(rows);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t c = 0; c < cols; ++c) ss += x.values()[r * cols + c] * x.values()[r * cols + c];
    if (!(ss > T{0})) {
      throw NumericalError("normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    norms[r] = std::sqrt(ss);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x.values()[r * cols + c] / norms[r];
  }
  return make_result<T>(x.shape(), std::move(out), {x},
                        [rows, cols, norms = std::move(norms)](Node<T>& self) {
                          accumulate(self, 0, [&](std::vector<T>& g) {
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T* y = self.value.data() + r * cols;
                              const T* gy = self.grad.data() + r * cols;
                              T dot{0};
                              for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                              for (std::size_t c = 0; c < cols; ++c)
                                g[r * cols + c] += (gy[c] - y[c] * dot) / norms[r];
                            }
                          });
                        });
}

#define TSF_INSTANTIATE_AD(T)                                                                   \
  template class Tensor<T>;                                                                     \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::vector<Tensor<T>>,              \
                                    std::function<void(Node<T>&)>);                             \
  template void backward<T>(const Tensor<T>&);                                                  \
  template void backward<T>(std::span<const std::pair<Tensor<T>, std::vector<T>>>);             \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mask_mul<T>(const Tensor<T>&, std::span<const T>);                         \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_rowwise<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                  \
  template Tensor<T> log<T>(const Tensor<T>&);                                                  \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                  \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> row_sum<T>(const Tensor<T>&);                                              \
  template Tensor<T> diag<T>(const Tensor<T>&);                                                 \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                       \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                            \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                 \
  template Tensor<T> concat_last_dim<T>(std::span<const Tensor<T>>);                            \
  template Tensor<T> concat_rows<T>(std::span<const Tensor<T>>);                                \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                         \
  template Tensor<T> log_softmax_rows<T>(const Tensor<T>&);                                     \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> conv2d_valid<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,           \
                                     std::size_t);                                              \
  template Tensor<T> cosine_similarity<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> normalize_rows<T>(const Tensor<T>&);

TSF_INSTANTIATE_AD(float)
TSF_INSTANTIATE_AD(double)

#undef TSF_INSTANTIATE_AD

}  // namespace tsf::ad
