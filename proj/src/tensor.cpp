// SPDX-License-Identifier: Apache-2.0

#include "cdistill/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "cdistill/random.hpp"

namespace cdistill {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(op) + ": non-finite value produced");
    }
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (!t.defined()) {
    throw ContractError(std::string(op) + ": undefined tensor");
  }
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

std::size_t last_dim(const char* op, const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError(std::string(op) + ": empty last dimension");
  }
  return x.shape().back();
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) {
    n *= d;
  }
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) {
      throw ShapeError("Tensor::from: zero-sized dimension in " + shape_to_string(shape));
    }
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_to_string(shape));
  }
  check_finite("Tensor::from", values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->leaf = true;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) {
    throw ContractError("Tensor: undefined");
  }
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("Tensor::dim: axis out of range for " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  if (!node_) {
    throw ContractError("Tensor: undefined");
  }
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("Tensor::item: tensor of shape " + shape_to_string(shape()) + " is not a scalar");
  }
  return node_->values[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  require_rank("Tensor::at", *this, 2);
  if (r >= dim(0) || c >= dim(1)) {
    throw ShapeError("Tensor::at: index out of range");
  }
  return node_->values[r * dim(1) + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) {
    throw ContractError("Tensor::set_requires_grad: only leaves can be flagged");
  }
  node_->requires_grad = flag;
}

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) {
    throw ContractError("Tensor::mutable_values: only leaves can be updated in place");
  }
  return node_->values;
}

Tensor Tensor::detach() const { return clone_leaf(false); }

Tensor Tensor::clone_leaf(bool requires_grad) const {
  return from(shape(), std::vector<double>(values().begin(), values().end()), requires_grad);
}

// ---- graph -----------------------------------------------------------------

const std::vector<double>& Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) {
    throw ContractError("Gradients::of: tensor is not a trainable leaf of this loss");
  }
  return it->second;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_op_result(const char* op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents, detail::BackwardFn backward) {
  check_finite(op, values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->leaf = false;
  const bool track =
      g_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) {
      node->parents.push_back(p.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

Gradients backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar");
  }
  Node* root = loss.node().get();
  if (root->consumed) {
    throw ContractError("backward: graph already released by a previous backward");
  }
  if (!root->requires_grad) {
    throw ContractError("backward: loss is not connected to any trainable leaf");
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        if (p->consumed) {
          throw ContractError("backward: graph already released by a previous backward");
        }
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<double>> grads;
  grads[root] = std::vector<double>(1, 1.0);
  Gradients result;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) {
      continue;
    }
    if (node->leaf) {
      result.insert(node, std::move(found->second));
      continue;
    }
    std::vector<std::vector<double>*> grad_in(node->parents.size(), nullptr);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      Node* p = node->parents[i].get();
      if (p->requires_grad) {
        auto& g = grads[p];
        if (g.empty()) {
          g.assign(p->values.size(), 0.0);
        }
        grad_in[i] = &g;
      }
    }
    node->backward(found->second, grad_in);
    grads.erase(node);
  }

  for (Node* node : order) {
    if (!node->leaf) {
      node->parents.clear();
      node->backward = nullptr;
      node->consumed = true;
    }
  }
  return result;
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) + " · " +
                     shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        orow[j] += aip * brow[j];
      }
    }
  }
  auto an = a.node(), bn = b.node();
  return make_op_result("matmul", {m, n}, std::move(out), {a, b},
                        [an, bn, m, k, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          const double* av = an->values.data();
                          const double* bv = bn->values.data();
                          if (in[0]) {
                            double* ga = in[0]->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                double acc = 0.0;
                                for (std::size_t j = 0; j < n; ++j) {
                                  acc += g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += acc;
                              }
                            }
                          }
                          if (in[1]) {
                            double* gb = in[1]->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t p = 0; p < k; ++p) {
                                const double aip = av[i * k + p];
                                for (std::size_t j = 0; j < n; ++j) {
                                  gb[p * n + j] += aip * g[i * n + j];
                                }
                              }
                            }
                          }
                        });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank("matmul_nt", a, 2);
  require_rank("matmul_nt", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimensions disagree " + shape_to_string(a.shape()) + " · " +
                     shape_to_string(b.shape()) + "ᵀ");
  }
  std::vector<double> out(m * n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = bv + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += arow[p] * brow[p];
      }
      out[i * n + j] = acc;
    }
  }
  auto an = a.node(), bn = b.node();
  return make_op_result("matmul_nt", {m, n}, std::move(out), {a, b},
                        [an, bn, m, k, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          const double* av = an->values.data();
                          const double* bv = bn->values.data();
                          if (in[0]) {
                            double* ga = in[0]->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                const double gij = g[i * n + j];
                                const double* brow = bv + j * k;
                                for (std::size_t p = 0; p < k; ++p) {
                                  ga[i * k + p] += gij * brow[p];
                                }
                              }
                            }
                          }
                          if (in[1]) {
                            double* gb = in[1]->data();
                            for (std::size_t i = 0; i < m; ++i) {
                              const double* arow = av + i * k;
                              for (std::size_t j = 0; j < n; ++j) {
                                const double gij = g[i * n + j];
                                for (std::size_t p = 0; p < k; ++p) {
                                  gb[j * k + p] += gij * arow[p];
                                }
                              }
                            }
                          }
                        });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[j * m + i] = av[i * n + j];
    }
  }
  return make_op_result("transpose", {n, m}, std::move(out), {a},
                        [m, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          auto& ga = *in[0];
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < n; ++j) {
                              ga[i * n + j] += g[j * m + i];
                            }
                          }
                        });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] + bv[i];
  }
  return make_op_result("add", a.shape(), std::move(out), {a, b},
                        [](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (auto* gi : in) {
                            if (gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                (*gi)[i] += g[i];
                              }
                            }
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] - bv[i];
  }
  return make_op_result("sub", a.shape(), std::move(out), {a, b},
                        [](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          if (in[0]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*in[0])[i] += g[i];
                            }
                          }
                          if (in[1]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*in[1])[i] -= g[i];
                            }
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] * bv[i];
  }
  auto an = a.node(), bn = b.node();
  return make_op_result("mul", a.shape(), std::move(out), {a, b},
                        [an, bn](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          if (in[0]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*in[0])[i] += g[i] * bn->values[i];
                            }
                          }
                          if (in[1]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*in[1])[i] += g[i] * an->values[i];
                            }
                          }
                        });
}

Tensor scale(const Tensor& a, double factor) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] * factor;
  }
  return make_op_result("scale", a.shape(), std::move(out), {a},
                        [factor](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*in[0])[i] += g[i] * factor;
                          }
                        });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_rank("add_row", a, 2);
  require_rank("add_row", bias, 1);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (bias.dim(0) != n) {
    throw ShapeError("add_row: bias " + shape_to_string(bias.shape()) + " does not match rows of " +
                     shape_to_string(a.shape()));
  }
  const auto av = a.values(), bv = bias.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = av[i * n + j] + bv[j];
    }
  }
  return make_op_result("add_row", a.shape(), std::move(out), {a, bias},
                        [m, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          if (in[0]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*in[0])[i] += g[i];
                            }
                          }
                          if (in[1]) {
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                (*in[1])[j] += g[i * n + j];
                              }
                            }
                          }
                        });
}

// ---- reductions ----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) {
    total += v;
  }
  return make_op_result("sum", {}, {total}, {a},
                        [](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (auto& x : *in[0]) {
                            x += g[0];
                          }
                        });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) {
    throw ContractError("add_n: no terms");
  }
  for (const auto& t : terms) {
    require_same_shape("add_n", terms.front(), t);
  }
  std::vector<double> out(terms.front().numel(), 0.0);
  for (const auto& t : terms) {
    const auto tv = t.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += tv[i];
    }
  }
  return make_op_result("add_n", terms.front().shape(), std::move(out),
                        std::vector<Tensor>(terms.begin(), terms.end()),
                        [](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (auto* gi : in) {
                            if (gi) {
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                (*gi)[i] += g[i];
                              }
                            }
                          }
                        });
}

// ---- softmax family --------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_dim("softmax_lastdim", x);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      o[j] /= z;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op_result("softmax_lastdim", x.shape(), std::move(out), {x},
                        [y, rows, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          auto& gx = *in[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t off = r * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              dot += g[off + j] * (*y)[off + j];
                            }
                            for (std::size_t j = 0; j < n; ++j) {
                              gx[off + j] += (*y)[off + j] * (g[off + j] - dot);
                            }
                          }
                        });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_dim("log_softmax_lastdim", x);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      z += std::exp(in[j] - mx);
    }
    const double log_z = std::log(z);
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = (in[j] - mx) - log_z;
    }
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_op_result("log_softmax_lastdim", x.shape(), std::move(out), {x},
                        [y, rows, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          auto& gx = *in[0];
                          for (std::size_t r = 0; r < rows; ++r) {
                            const std::size_t off = r * n;
                            double gsum = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              gsum += g[off + j];
                            }
                            for (std::size_t j = 0; j < n; ++j) {
                              gx[off + j] += g[off + j] - std::exp((*y)[off + j]) * gsum;
                            }
                          }
                        });
}

// ---- normalization / activation ---------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank("layer_norm", x, 2);
  require_rank("layer_norm", gamma, 1);
  require_same_shape("layer_norm", gamma, beta);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.dim(0) != n) {
    throw ShapeError("layer_norm: gain " + shape_to_string(gamma.shape()) + " does not match " +
                     shape_to_string(x.shape()));
  }
  const auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  std::vector<double> out(m * n);
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mu += row[j];
    }
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      var += (row[j] - mu) * (row[j] - mu);
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gv[j] + bv[j];
    }
  }
  auto gn = gamma.node();
  return make_op_result(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat, inv_std, gn, m, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
        const auto& gv = gn->values;
        if (in[0]) {
          auto& gx = *in[0];
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dh = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              mean_d += d;
              mean_dh += d * (*xhat)[i * n + j];
            }
            mean_d /= static_cast<double>(n);
            mean_dh /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gv[j];
              gx[i * n + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * n + j] * mean_dh);
            }
          }
        }
        if (in[1]) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              (*in[1])[j] += g[i * n + j] * (*xhat)[i * n + j];
            }
          }
        }
        if (in[2]) {
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              (*in[2])[j] += g[i * n + j];
            }
          }
        }
      });
}

// Exact (erf) GELU.
Tensor gelu(const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  }
  auto xn = x.node();
  return make_op_result("gelu", x.shape(), std::move(out), {x},
                        [xn](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const double v = xn->values[i];
                            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
                            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                            (*in[0])[i] += g[i] * (cdf + v * pdf);
                          }
                        });
}

// ---- indexing ----------------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids) {
  require_rank("embedding", table, 2);
  if (ids.empty()) {
    throw ShapeError("embedding: empty id sequence");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  const auto tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[t]) + " outside table of " +
                          std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  return make_op_result("embedding", {ids.size(), d}, std::move(out), {table},
                        [idv = std::move(idv), d](const std::vector<double>& g,
                                                  std::vector<std::vector<double>*>& in) {
                          auto& gt = *in[0];
                          for (std::size_t t = 0; t < idv.size(); ++t) {
                            const std::size_t base = static_cast<std::size_t>(idv[t]) * d;
                            for (std::size_t j = 0; j < d; ++j) {
                              gt[base + j] += g[t * d + j];
                            }
                          }
                        });
}

Tensor row(const Tensor& x, std::size_t index) {
  require_rank("row", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (index >= m) {
    throw ShapeError("row: index " + std::to_string(index) + " outside " + shape_to_string(x.shape()));
  }
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(index * n),
                          xv.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
  return make_op_result("row", {n}, std::move(out), {x},
                        [index, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (std::size_t j = 0; j < n; ++j) {
                            (*in[0])[index * n + j] += g[j];
                          }
                        });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (begin >= end || end > m) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                     shape_to_string(x.shape()));
  }
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          xv.begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_op_result("slice_rows", {end - begin, n}, std::move(out), {x},
                        [begin, n](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*in[0])[begin * n + i] += g[i];
                          }
                        });
}

// ---- attention -----------------------------------------------------------------------

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads) {
  require_rank("causal_attention", q, 2);
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  const std::size_t T = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention: model width " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.values(), kv = k.values(), vv = v.values();

  // probs[h][i][j] for j <= i, stored as full T×T per head.
  auto probs = std::make_shared<std::vector<double>>(n_heads * T * T, 0.0);
  std::vector<double> out(T * d, 0.0);
  std::vector<double> scores(T);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t i = 0; i < T; ++i) {
      const double* qi = qv.data() + i * d + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        const double* kj = kv.data() + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) {
          s += qi[c] * kj[c];
        }
        scores[j] = s * inv_scale;
        mx = std::max(mx, scores[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      double* p = probs->data() + (h * T + i) * T;
      double* oi = out.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = scores[j] / z;
        const double* vj = vv.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) {
          oi[c] += p[j] * vj[c];
        }
      }
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  return make_op_result(
      "causal_attention", {T, d}, std::move(out), {q, k, v},
      [probs, qn, kn, vn, T, d, hd, n_heads, inv_scale](const std::vector<double>& g,
                                                          std::vector<std::vector<double>*>& in) {
        const auto& qv = qn->values;
        const auto& kv = kn->values;
        const auto& vv = vn->values;
        std::vector<double> dp(T);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t i = 0; i < T; ++i) {
            const double* p = probs->data() + (h * T + i) * T;
            const double* gi = g.data() + i * d + off;
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              const double* vj = vv.data() + j * d + off;
              double acc = 0.0;
              for (std::size_t c = 0; c < hd; ++c) {
                acc += gi[c] * vj[c];
              }
              dp[j] = acc;
              dot += p[j] * acc;
            }
            for (std::size_t j = 0; j <= i; ++j) {
              if (in[2]) {
                double* gv = in[2]->data() + j * d + off;
                for (std::size_t c = 0; c < hd; ++c) {
                  gv[c] += p[j] * gi[c];
                }
              }
              const double ds = p[j] * (dp[j] - dot) * inv_scale;
              if (in[0]) {
                double* gq = in[0]->data() + i * d + off;
                const double* kj = kv.data() + j * d + off;
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += ds * kj[c];
                }
              }
              if (in[1]) {
                double* gk = in[1]->data() + j * d + off;
                const double* qi = qv.data() + i * d + off;
                for (std::size_t c = 0; c < hd; ++c) {
                  gk[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// ---- dropout ------------------------------------------------------------------------------

Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool train) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ContractError("dropout: probability must lie in [0, 1)");
  }
  if (!train || p == 0.0) {
    return x;
  }
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  for (auto& m : *mask) {
    m = rng.uniform() < p ? 0.0 : keep_scale;
  }
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = xv[i] * (*mask)[i];
  }
  return make_op_result("dropout", x.shape(), std::move(out), {x},
                        [mask](const std::vector<double>& g, std::vector<std::vector<double>*>& in) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*in[0])[i] += g[i] * (*mask)[i];
                          }
                        });
}

}  // namespace cdistill
