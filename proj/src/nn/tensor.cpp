#include "docgeo/nn/tensor.hpp"

#include <unordered_set>

#include "docgeo/error.hpp"

namespace docgeo::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

Tensor Tensor::zeros(const Shape& s, bool rg) { return full(s, 0.0, rg); }

Tensor Tensor::full(const Shape& s, double v, bool rg) {
  for (int d : s) require(d >= 0, ErrorCode::InvalidArgument, "negative dimension");
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value.assign(nn::numel(s), v);
  n->requires_grad = rg;
  return Tensor(n);
}

Tensor Tensor::from(const Shape& s, Buffer values, bool rg) {
  require(values.size() == nn::numel(s), ErrorCode::ShapeMismatch,
          "value count does not match shape " + shape_str(s));
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value = std::move(values);
  n->requires_grad = rg;
  return Tensor(n);
}

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  require(i >= 0 && i < rank(), ErrorCode::OutOfRange, "dimension index out of range");
  return node_->shape[i];
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::ShapeMismatch, "item() on a non-scalar " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), data(), false); }

void Tensor::backward() {
  require(numel() == 1, ErrorCode::ShapeMismatch, "backward() needs a scalar");
  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_result(const Shape& shape, Buffer value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const Tensor& t : inputs)
      if (t.defined() && t.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
      for (const Tensor& t : inputs)
        if (t.defined()) n->parents.push_back(t.ptr());
      n->backward = std::move(backward);
    }
  }
  return Tensor(n);
}

}  // namespace docgeo::nn
