// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with define-by-run reverse-mode differentiation.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cdistill {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
}

/// Handle to a node in the computation graph. Copies share storage.
///
/// Values are immutable once created; the only sanctioned mutation is an
/// in-place parameter update on a leaf through `mutable_values()`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> values() const;
  double item() const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool is_leaf() const;
  // Only valid on leaves; toggles whether backward() reports a gradient.
  void set_requires_grad(bool flag);

  // Leaf-only write access, used by optimizers and weight loading.
  std::span<double> mutable_values();

  // A leaf tensor holding a copy of these values, detached from any graph.
  Tensor detach() const;
  Tensor clone_leaf(bool requires_grad) const;

  const detail::Node* id() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node) { return Tensor(std::move(node)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn =
    std::function<void(const std::vector<double>& grad_out, std::vector<std::vector<double>*>& grad_in)>;

struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

// Records a new op output after checking every value is finite. No graph
// edge is recorded when grad is disabled or no parent requires grad.
Tensor make_op_result(const char* op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents, detail::BackwardFn backward);

/// Gradients of a scalar loss keyed by leaf identity.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }
  const std::vector<double>& of(const Tensor& leaf) const;
  std::size_t size() const noexcept { return grads_.size(); }

  void insert(const detail::Node* leaf, std::vector<double> grad) { grads_[leaf] = std::move(grad); }

 private:
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

/// Reverse-mode sweep from a scalar loss. Each graph node is visited once in
/// reverse topological order; afterwards intermediates drop their edges, so a
/// second backward through the same graph is a contract error.
Gradients backward(const Tensor& loss);

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]·[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]·[n,k]ᵀ
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_row(const Tensor& a, const Tensor& bias);  // [m,n] + [n] per row

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor add_n(std::span<const Tensor> terms);

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& x);

// Rows of `table` gathered by id: [vocab,d] → [ids.size(),d].
Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids);
Tensor row(const Tensor& x, std::size_t index);  // [m,n] → [n]
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);  // [m,n] → [end-begin,n]

// Multi-head causal scaled dot-product attention over [T,d] projections.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);

// Inverted dropout. Identity when !train or p == 0; mask is a pure function of seed.
Tensor dropout(const Tensor& x, double p, std::uint64_t seed, bool train);

}  // namespace cdistill
