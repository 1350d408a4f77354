#include "stepscope/tensor/autograd.hpp"

#include <algorithm>
#include <unordered_set>

#include "stepscope/tensor/ops.hpp"

namespace stepscope::autograd {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void GradMap::add(const Tensor& t, const Tensor& g) {
  check(g.shape() == t.shape() && g.dtype() == t.dtype(),
        "grad accumulation: shape/dtype mismatch for op gradient");
  auto it = grads_.find(t.impl());
  if (it == grads_.end()) {
    grads_.emplace(t.impl(), g);
  } else {
    ops::accumulate_(it->second, g);
  }
}

Tensor GradMap::get(const Tensor& t) const {
  auto it = grads_.find(t.impl());
  return it == grads_.end() ? Tensor{} : it->second;
}

void attach_node(Tensor& out, const char* op, std::vector<Tensor> inputs,
                 std::function<void(const Tensor&, GradMap&)> backward_fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || needs_graph(in);
  if (!any) return;
  auto node = std::make_shared<Node>();
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward_fn);
  out.set_node(std::move(node));
}

void backward(const Tensor& loss, const BackwardOptions& opts) {
  check(loss.defined(), "backward: undefined loss");
  check(loss.numel() == 1, "backward: loss must be scalar, got shape ", shape_str(loss.shape()));
  if (!loss.node()) {
    check(loss.requires_grad(), "backward: loss is detached from any differentiable graph");
  }

  // Iterative post-order topological sort over producing nodes.
  std::vector<Tensor> order;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<Tensor, size_t>> stack;  // (tensor, next input index)
  stack.emplace_back(loss, 0);
  visited.insert(loss.impl());
  while (!stack.empty()) {
    auto& [t, idx] = stack.back();
    auto node = t.node();
    if (!node || idx >= node->inputs.size()) {
      order.push_back(t);
      stack.pop_back();
      continue;
    }
    Tensor next = node->inputs[idx++];
    if (next.node() && !visited.count(next.impl())) {
      visited.insert(next.impl());
      stack.emplace_back(next, 0);
    }
  }

  for (const auto& t : order) {
    if (auto n = t.node(); n && n->consumed)
      fail("backward: graph already consumed (op '", n->op, "'); re-run the forward pass");
  }

  GradMap local;
  GradMap& gm = opts.sink ? *opts.sink : local;
  gm.add(loss, Tensor::full(loss.shape(), 1.0, loss.dtype()));

  // order is post-order: inputs precede consumers, so walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto node = it->node();
    if (!node) continue;
    node->consumed = true;
    Tensor gout = gm.get(*it);
    if (!gout.defined()) continue;  // branch not reached by the loss
    node->backward(gout, gm);
    // release saved context; the graph is single-use
    node->backward = nullptr;
    node->inputs.clear();
  }

  if (!opts.sink) {
    for (const auto& [impl, g] : gm.entries()) {
      if (!impl->requires_grad) continue;
      auto* mut = const_cast<TensorImpl*>(impl);
      if (mut->grad) {
        Tensor dst = Tensor::wrap(mut->grad);
        ops::accumulate_(dst, g);
      } else {
        mut->grad = g.impl_ptr();
      }
    }
  }
}

}  // namespace stepscope::autograd
