#include "osad/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace osad {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace osad

namespace osad::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->value.shape != b->value.shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a->value.shape) +
                                " vs " + shape_string(b->value.shape));
  }
}

void check_rank(const Var& a, std::size_t rank, const char* op) {
  if (a->value.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(a->value.shape));
  }
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || (p && p->requires_grad);
  n->requires_grad = needs;
  if (needs) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return n;
}

bool wants(const Var& v) { return v && v->requires_grad; }

template <typename F>
Var unary(const Var& a, F&& fwd_and_deriv) {
  Tensor out(a->value.shape);
  Tensor deriv(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    auto [y, dy] = fwd_and_deriv(a->value[i]);
    out[i] = y;
    deriv[i] = dy;
  }
  return make_node(std::move(out), {a}, [a, deriv = std::move(deriv)](Node& self) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * deriv[i];
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.numel() != value.numel() || grad.shape != value.shape) grad = Tensor(value.shape, 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var detach(const Var& x) { return constant(x->value); }

void zero_grad(const Var& leaf) {
  if (leaf->grad.numel()) std::fill(leaf->grad.data.begin(), leaf->grad.data.end(), 0.0);
}

void backward(const Var& root) {
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS for topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; leaves accumulate.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor(n->value.shape, 0.0);
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
  // Release interior buffers.
  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] / b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / b->value[i];
    }
    if (wants(b)) {
      auto& g = b->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double bv = b->value[i];
        g[i] -= self.grad[i] * a->value[i] / (bv * bv);
      }
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return std::pair{s * x, s}; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return std::pair{x + s, 1.0}; });
}

Var one_minus(const Var& a) {
  return unary(a, [](double x) { return std::pair{1.0 - x, -1.0}; });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? std::pair{x, 1.0} : std::pair{0.0, 0.0}; });
}

Var silu(const Var& a) {
  return unary(a, [](double x) {
    const double sg = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{x * sg, sg * (1.0 + x * (1.0 - sg))};
  });
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) {
    const double y = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{y, y * (1.0 - y)};
  });
}

Var log(const Var& a) {
  return unary(a, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) {
    const double y = std::exp(x);
    return std::pair{y, y};
  });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return std::pair{x * x, 2.0 * x}; });
}

Var abs(const Var& a) {
  return unary(a, [](double x) { return std::pair{std::abs(x), x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0)}; });
}

Var clamp_min(const Var& a, double lo) {
  return unary(a, [lo](double x) { return x > lo ? std::pair{x, 1.0} : std::pair{lo, 0.0}; });
}

Var mul_const(const Var& a, const Tensor& mask) {
  if (a->value.shape != mask.shape) throw std::invalid_argument("mul_const: shape mismatch");
  Tensor out(a->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * mask[i];
  return make_node(std::move(out), {a}, [a, mask](Node& self) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a->value.numel()) {
    throw std::invalid_argument("reshape: " + shape_string(a->value.shape) + " -> " + shape_string(shape));
  }
  Tensor out(std::move(shape), a->value.data);
  return make_node(std::move(out), {a}, [a](Node& self) {
    auto& g = a->grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value.data) s += v;
  return make_node(Tensor::scalar(s), {a}, [a](Node& self) {
    auto& g = a->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g.data) v += up;
  });
}

Var mean(const Var& a) {
  const auto n = static_cast<double>(a->value.numel());
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  check_rank(a, 2, "row_sum");
  const auto rows = a->value.dim(0), cols = a->value.dim(1);
  Tensor out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += a->value.at(r, c);
    out[r] = s;
  }
  return make_node(std::move(out), {a}, [a, rows, cols](Node& self) {
    auto& g = a->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += self.grad[r];
  });
}

Var col_mean(const Var& a) {
  check_rank(a, 2, "col_mean");
  const auto rows = a->value.dim(0), cols = a->value.dim(1);
  if (rows == 0) throw std::invalid_argument("col_mean of zero rows");
  Tensor out(Shape{cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += a->value.at(r, c);
  for (auto& v : out.data) v /= static_cast<double>(rows);
  return make_node(std::move(out), {a}, [a, rows, cols](Node& self) {
    auto& g = a->grad_buffer();
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) g.at(r, c) += self.grad[c] * inv;
  });
}

Var weighted_sum(std::span<const Var> terms, std::span<const double> weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  std::vector<Var> parents(terms.begin(), terms.end());
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i]->value.numel() != 1) throw std::invalid_argument("weighted_sum: terms must be scalars");
    s += weights[i] * terms[i]->value[0];
  }
  std::vector<double> w(weights.begin(), weights.end());
  return make_node(Tensor::scalar(s), parents, [parents, w](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (wants(parents[i])) parents[i]->grad_buffer()[0] += self.grad[0] * w[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix ops

Var matmul(const Var& a, const Var& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const auto n = a->value.dim(0), k = a->value.dim(1), m = b->value.dim(1);
  if (b->value.dim(0) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out(Shape{n, m});
  MapMat(out.data.data(), n, m).noalias() =
      CMapMat(a->value.data.data(), n, k) * CMapMat(b->value.data.data(), k, m);
  return make_node(std::move(out), {a, b}, [a, b, n, k, m](Node& self) {
    CMapMat up(self.grad.data.data(), n, m);
    if (wants(a)) {
      MapMat(a->grad_buffer().data.data(), n, k).noalias() += up * CMapMat(b->value.data.data(), k, m).transpose();
    }
    if (wants(b)) {
      MapMat(b->grad_buffer().data.data(), k, m).noalias() += CMapMat(a->value.data.data(), n, k).transpose() * up;
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  check_rank(x, 2, "linear");
  check_rank(w, 2, "linear");
  const auto n = x->value.dim(0), d = x->value.dim(1), o = w->value.dim(1);
  if (w->value.dim(0) != d) {
    throw std::invalid_argument("linear: input " + shape_string(x->value.shape) + " vs weight " +
                                shape_string(w->value.shape));
  }
  Tensor out(Shape{n, o});
  MapMat om(out.data.data(), n, o);
  om.noalias() = CMapMat(x->value.data.data(), n, d) * CMapMat(w->value.data.data(), d, o);
  if (bias) {
    if (bias->value.numel() != o) throw std::invalid_argument("linear: bias size mismatch");
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < o; ++c) om(r, c) += bias->value[c];
  }
  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_node(std::move(out), parents, [x, w, bias, n, d, o](Node& self) {
    CMapMat up(self.grad.data.data(), n, o);
    if (wants(x)) {
      MapMat(x->grad_buffer().data.data(), n, d).noalias() += up * CMapMat(w->value.data.data(), d, o).transpose();
    }
    if (wants(w)) {
      MapMat(w->grad_buffer().data.data(), d, o).noalias() += CMapMat(x->value.data.data(), n, d).transpose() * up;
    }
    if (wants(bias)) {
      auto& g = bias->grad_buffer();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < o; ++c) g[c] += up(r, c);
    }
  });
}

Var combine_rows(const Tensor& m, const Var& x) {
  if (m.rank() != 2 || x->value.rank() < 1 || m.dim(1) != x->value.dim(0)) {
    throw std::invalid_argument("combine_rows: " + shape_string(m.shape) + " x " + shape_string(x->value.shape));
  }
  const auto p = m.dim(0), t = m.dim(1);
  const auto k = x->value.numel() / std::max<std::size_t>(t, 1);
  Shape out_shape = x->value.shape;
  out_shape[0] = p;
  Tensor out(out_shape);
  MapMat(out.data.data(), p, k).noalias() = CMapMat(m.data.data(), p, t) * CMapMat(x->value.data.data(), t, k);
  return make_node(std::move(out), {x}, [x, m, p, t, k](Node& self) {
    MapMat(x->grad_buffer().data.data(), t, k).noalias() +=
        CMapMat(m.data.data(), p, t).transpose() * CMapMat(self.grad.data.data(), p, k);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const auto n = parts[0]->value.dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    check_rank(p, 2, "concat_cols");
    if (p->value.dim(0) != n) throw std::invalid_argument("concat_cols: row count mismatch");
    total += p->value.dim(1);
  }
  Tensor out(Shape{n, total});
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto c = p->value.dim(1);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < c; ++j) out.at(r, off + j) = p->value.at(r, j);
    off += c;
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_node(std::move(out), parents, [parents, offsets, n, total](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!wants(parents[i])) continue;
      auto& g = parents[i]->grad_buffer();
      const auto c = g.dim(1);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) g.at(r, j) += self.grad[r * total + offsets[i] + j];
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape shape = parts[0]->value.shape;
  if (shape.empty()) throw std::invalid_argument("concat_rows: scalar input");
  std::size_t rows = 0;
  for (const auto& p : parts) {
    const auto& s = p->value.shape;
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1))
      throw std::invalid_argument("concat_rows: trailing shape mismatch " + shape_string(s));
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p->value.data.begin(), p->value.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->value.numel();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return make_node(std::move(out), parents, [parents, offsets](Node& self) {
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!wants(parents[i])) continue;
      auto& g = parents[i]->grad_buffer();
      for (std::size_t j = 0; j < g.numel(); ++j) g[j] += self.grad[offsets[i] + j];
    }
  });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  check_rank(x, 2, "slice_cols");
  const auto n = x->value.dim(0), cols = x->value.dim(1);
  if (start + count > cols) throw std::invalid_argument("slice_cols: out of range");
  Tensor out(Shape{n, count});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < count; ++j) out.at(r, j) = x->value.at(r, start + j);
  return make_node(std::move(out), {x}, [x, start, count, n](Node& self) {
    auto& g = x->grad_buffer();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < count; ++j) g.at(r, start + j) += self.grad[r * count + j];
  });
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  if (x->value.rank() < 1 || start + count > x->value.dim(0)) throw std::invalid_argument("slice_rows: out of range");
  const auto inner = x->value.numel() / x->value.dim(0);
  Shape shape = x->value.shape;
  shape[0] = count;
  Tensor out(shape);
  std::copy_n(x->value.data.begin() + static_cast<std::ptrdiff_t>(start * inner), count * inner, out.data.begin());
  return make_node(std::move(out), {x}, [x, start, inner](Node& self) {
    auto& g = x->grad_buffer();
    for (std::size_t i = 0; i < self.grad.numel(); ++i) g[start * inner + i] += self.grad[i];
  });
}

Var gather_cols(const Var& x, std::span<const std::size_t> idx) {
  check_rank(x, 2, "gather_cols");
  const auto n = x->value.dim(0), cols = x->value.dim(1);
  if (idx.size() != n) throw std::invalid_argument("gather_cols: index count mismatch");
  Tensor out(Shape{n});
  std::vector<std::size_t> index(idx.begin(), idx.end());
  for (std::size_t r = 0; r < n; ++r) {
    if (index[r] >= cols) throw std::invalid_argument("gather_cols: index out of range");
    out[r] = x->value.at(r, index[r]);
  }
  return make_node(std::move(out), {x}, [x, index](Node& self) {
    auto& g = x->grad_buffer();
    for (std::size_t r = 0; r < index.size(); ++r) g.at(r, index[r]) += self.grad[r];
  });
}

Var softmax_rows(const Var& x) {
  check_rank(x, 2, "softmax_rows");
  const auto n = x->value.dim(0), k = x->value.dim(1);
  Tensor out(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, x->value.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += (out.at(r, c) = std::exp(x->value.at(r, c) - mx));
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) /= z;
  }
  Tensor y = out;
  return make_node(std::move(out), {x}, [x, y = std::move(y), n, k](Node& self) {
    auto& g = x->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += self.grad[r * k + c] * y.at(r, c);
      for (std::size_t c = 0; c < k; ++c) g.at(r, c) += y.at(r, c) * (self.grad[r * k + c] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  check_rank(x, 2, "log_softmax_rows");
  const auto n = x->value.dim(0), k = x->value.dim(1);
  Tensor out(Shape{n, k});
  Tensor prob(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, x->value.at(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(x->value.at(r, c) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < k; ++c) {
      out.at(r, c) = x->value.at(r, c) - lz;
      prob.at(r, c) = std::exp(out.at(r, c));
    }
  }
  return make_node(std::move(out), {x}, [x, prob = std::move(prob), n, k](Node& self) {
    auto& g = x->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += self.grad[r * k + c];
      for (std::size_t c = 0; c < k; ++c) g.at(r, c) += self.grad[r * k + c] - prob.at(r, c) * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

Var conv2d(const Var& x, const Var& w, const Var& bias, std::size_t stride, std::size_t pad) {
  check_rank(x, 4, "conv2d");
  check_rank(w, 4, "conv2d");
  const auto n = x->value.dim(0), ci = x->value.dim(1), h = x->value.dim(2), wd = x->value.dim(3);
  const auto co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  if (w->value.dim(1) != ci) {
    throw std::invalid_argument("conv2d: input channels " + std::to_string(ci) + " vs weight " +
                                shape_string(w->value.shape));
  }
  if (stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw) throw std::invalid_argument("conv2d: bad geometry");
  const auto ho = (h + 2 * pad - kh) / stride + 1;
  const auto wo = (wd + 2 * pad - kw) / stride + 1;
  const auto ckk = ci * kh * kw;
  const auto np = n * ho * wo;

  // im2col: col[ckk, n*ho*wo]
  Tensor col(Shape{ckk, np});
  const auto& xv = x->value.data;
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = col.data.data() + ((c * kh + ky) * kw + kx) * np;
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              double v = 0.0;
              if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix < static_cast<std::ptrdiff_t>(wd)) {
                v = xv[((b * ci + c) * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
              }
              row[(b * ho + oy) * wo + ox] = v;
            }
          }
      }

  RowMat om = CMapMat(w->value.data.data(), co, ckk) * CMapMat(col.data.data(), ckk, np);
  Tensor out(Shape{n, co, ho, wo});
  const auto hw = ho * wo;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      const double bv = bias ? bias->value[o] : 0.0;
      for (std::size_t p = 0; p < hw; ++p) out.data[(b * co + o) * hw + p] = om(o, b * hw + p) + bv;
    }

  std::vector<Var> parents{x, w};
  if (bias) parents.push_back(bias);
  return make_node(std::move(out), parents,
                   [x, w, bias, col = std::move(col), n, ci, h, wd, co, kh, kw, ho, wo, ckk, np, stride,
                    pad](Node& self) {
                     const auto hw = ho * wo;
                     RowMat up(co, np);
                     for (std::size_t b = 0; b < n; ++b)
                       for (std::size_t o = 0; o < co; ++o)
                         for (std::size_t p = 0; p < hw; ++p) up(o, b * hw + p) = self.grad.data[(b * co + o) * hw + p];
                     if (wants(bias)) {
                       auto& g = bias->grad_buffer();
                       for (std::size_t o = 0; o < co; ++o) g[o] += up.row(static_cast<Eigen::Index>(o)).sum();
                     }
                     if (wants(w)) {
                       MapMat(w->grad_buffer().data.data(), co, ckk).noalias() +=
                           up * CMapMat(col.data.data(), ckk, np).transpose();
                     }
                     if (wants(x)) {
                       RowMat dcol = CMapMat(w->value.data.data(), co, ckk).transpose() * up;
                       auto& g = x->grad_buffer().data;
                       for (std::size_t c = 0; c < ci; ++c)
                         for (std::size_t ky = 0; ky < kh; ++ky)
                           for (std::size_t kx = 0; kx < kw; ++kx) {
                             const auto r = static_cast<Eigen::Index>((c * kh + ky) * kw + kx);
                             for (std::size_t b = 0; b < n; ++b)
                               for (std::size_t oy = 0; oy < ho; ++oy) {
                                 const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                 static_cast<std::ptrdiff_t>(pad);
                                 if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                 for (std::size_t ox = 0; ox < wo; ++ox) {
                                   const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                   static_cast<std::ptrdiff_t>(pad);
                                   if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                                   g[((b * ci + c) * h + static_cast<std::size_t>(iy)) * wd +
                                     static_cast<std::size_t>(ix)] +=
                                       dcol(r, static_cast<Eigen::Index>((b * ho + oy) * wo + ox));
                                 }
                               }
                           }
                     }
                   });
}

Var spatial_mean(const Var& x) {
  check_rank(x, 4, "spatial_mean");
  const auto n = x->value.dim(0), c = x->value.dim(1), hw = x->value.dim(2) * x->value.dim(3);
  Tensor out(Shape{n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += x->value.data[i * hw + p];
    out.data[i] = s / static_cast<double>(hw);
  }
  return make_node(std::move(out), {x}, [x, n, c, hw](Node& self) {
    auto& g = x->grad_buffer().data;
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] += self.grad.data[i] * inv;
  });
}

Var mul_channel_broadcast(const Var& a, const Var& z) {
  check_rank(a, 4, "mul_channel_broadcast");
  check_rank(z, 4, "mul_channel_broadcast");
  const auto n = z->value.dim(0), c = z->value.dim(1), hw = z->value.dim(2) * z->value.dim(3);
  if (a->value.dim(0) != n || a->value.dim(1) != 1 || a->value.dim(2) * a->value.dim(3) != hw) {
    throw std::invalid_argument("mul_channel_broadcast: " + shape_string(a->value.shape) + " vs " +
                                shape_string(z->value.shape));
  }
  Tensor out(z->value.shape);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p)
        out.data[(b * c + ch) * hw + p] = a->value.data[b * hw + p] * z->value.data[(b * c + ch) * hw + p];
  return make_node(std::move(out), {a, z}, [a, z, n, c, hw](Node& self) {
    if (wants(a)) {
      auto& g = a->grad_buffer().data;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p)
            g[b * hw + p] += self.grad.data[(b * c + ch) * hw + p] * z->value.data[(b * c + ch) * hw + p];
    }
    if (wants(z)) {
      auto& g = z->grad_buffer().data;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p)
            g[(b * c + ch) * hw + p] += self.grad.data[(b * c + ch) * hw + p] * a->value.data[b * hw + p];
    }
  });
}

}  // namespace osad::ad

namespace osad::ad {

Var softplus(const Var& a) {
  return unary(a, [](double x) {
    const double y = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{y, s};
  });
}

Var div_by_scalar(const Var& x, const Var& s) {
  if (s->value.numel() != 1) throw std::invalid_argument("div_by_scalar: divisor must be scalar");
  const double sv = s->value[0];
  Tensor out(x->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] / sv;
  return make_node(std::move(out), {x, s}, [x, s, sv](Node& self) {
    if (wants(x)) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / sv;
    }
    if (wants(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * x->value[i];
      s->grad_buffer()[0] -= acc / (sv * sv);
    }
  });
}

Var sub_row_broadcast(const Var& x, const Var& r) {
  check_rank(x, 2, "sub_row_broadcast");
  const auto n = x->value.dim(0), k = x->value.dim(1);
  if (r->value.numel() != k) throw std::invalid_argument("sub_row_broadcast: width mismatch");
  Tensor out(x->value.shape);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = x->value.at(i, j) - r->value[j];
  return make_node(std::move(out), {x, r}, [x, r, n, k](Node& self) {
    if (wants(x)) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
    if (wants(r)) {
      auto& g = r->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) g[j] -= self.grad[i * k + j];
    }
  });
}

}  // namespace osad::ad
