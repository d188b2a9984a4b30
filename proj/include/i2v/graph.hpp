#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "i2v/error.hpp"
#include "i2v/tensor.hpp"

namespace i2v {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph() const { return graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so creation
// order is a topological order and backward walks it in reverse, visiting
// each node once.
class Graph {
 public:
  // Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Graph&, const Tensor&)>;

  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // False for inference-only graphs: ops skip saving backward closures.
  bool recording() const { return record_; }

  Var constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push_node(std::move(n));
  }

  // Leaf bound to a trainable parameter. The value is referenced, not
  // copied; gradients are accumulated into p.grad by backward().
  Var param(Parameter& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.requires_grad = record_;
    return push_node(std::move(n));
  }

  // Leaf referencing a tensor that outlives the graph; never differentiated.
  Var view(const Tensor& t) {
    Node n;
    n.external = &t;
    return push_node(std::move(n));
  }

  // Appends an op result. `parents` decide whether the node needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
  }

  Var push(Tensor value, std::span<const Var> parents, BackwardFn fn) {
    bool needs = false;
    if (record_) {
      for (const Var& p : parents) needs = needs || requires_grad(p);
    }
    if (check_finite_ && !value.all_finite()) {
      throw NumericalError("non-finite value produced by graph op");
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    return push_node(std::move(n));
  }

  const Tensor& value(Var v) const {
    const Node& n = nodes_[v.id()];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

  // Gradient buffer of a node, allocated as zeros on first touch.
  Tensor& grad(Var v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor(value(v).shape(), 0.0);
    return n.grad;
  }

  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    if (loss.graph() != this) throw InputError("backward: variable from another graph");
    if (value(loss).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_string(value(loss).shape()));
    }
    if (!record_) throw InputError("backward: graph was built without recording");
    grad(loss).fill(1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.param) {
        n.param->grad += n.grad;
      } else if (n.backward) {
        // Closure and gradient are released once consumed.
        BackwardFn fn = std::move(n.backward);
        const Tensor g = std::move(n.grad);
        fn(*this, g);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push_node(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool record_ = true;
  bool check_finite_ = true;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

}  // namespace i2v
