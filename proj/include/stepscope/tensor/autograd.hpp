#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "stepscope/tensor/tensor.hpp"

namespace stepscope::autograd {

// Accumulates gradients keyed by tensor identity. Backward never writes into
// shared tensors directly, so concurrent backward passes on disjoint graphs
// (or on shared leaves via private GradMaps) are safe.
class GradMap {
 public:
  void add(const Tensor& t, const Tensor& g);
  bool has(const Tensor& t) const { return grads_.count(t.impl()) != 0; }
  Tensor get(const Tensor& t) const;
  const std::unordered_map<const TensorImpl*, Tensor>& entries() const { return grads_; }

 private:
  std::unordered_map<const TensorImpl*, Tensor> grads_;
};

struct Node {
  std::string op;
  std::vector<Tensor> inputs;  // keeps parents (and saved context) alive
  std::function<void(const Tensor& grad_out, GradMap& gm)> backward;
  bool consumed = false;
};

// Thread-local switch: when grads are disabled no nodes are recorded, so
// inference runs tape-free.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool needs_graph(const Tensor& t) { return t.requires_grad() || t.node() != nullptr; }

// Attaches a backward node to `out` if grad recording is active and any
// input participates in a graph. Modules use this to define custom
// differentiable ops without touching engine internals.
void attach_node(Tensor& out, const char* op, std::vector<Tensor> inputs,
                 std::function<void(const Tensor&, GradMap&)> backward);

struct BackwardOptions {
  // When set, gradients are left in `sink` instead of being written to the
  // leaves' .grad fields (thread-safe accumulation for data-parallel use).
  GradMap* sink = nullptr;
};

// Reverse-mode sweep from a scalar loss. Populates .grad on every reachable
// tensor with requires_grad=true (accumulating), unless a sink is given.
// A graph may be consumed exactly once; repeat calls throw.
void backward(const Tensor& loss, const BackwardOptions& opts = {});

}  // namespace stepscope::autograd
