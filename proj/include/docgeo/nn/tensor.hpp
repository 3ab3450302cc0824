#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace docgeo::nn {

/// 64-byte aligned storage. Vectorized reductions peel according to the
/// address, so a fixed alignment keeps results independent of allocation
/// history.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

inline bool operator==(const Buffer& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
inline Buffer to_buffer(const std::vector<double>& v) { return Buffer(v.begin(), v.end()); }
inline std::vector<double> to_vector(const Buffer& b) { return std::vector<double>(b.begin(), b.end()); }

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until needed
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Shared handle to a node of the computation graph. Copies alias.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor from(const Shape& s, Buffer values, bool requires_grad = false);
  static Tensor from(const Shape& s, const std::vector<double>& values, bool requires_grad = false) {
    return from(s, to_buffer(values), requires_grad);
  }
  static Tensor from(const Shape& s, std::initializer_list<double> values, bool requires_grad = false) {
    return from(s, Buffer(values), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }
  Buffer& data() { return node_->value; }
  const Buffer& data() const { return node_->value; }
  Buffer& grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  double item() const;
  void zero_grad() { node_->grad.clear(); }
  /// Copy of the value outside the graph.
  Tensor detach() const;
  /// Reverse-mode sweep from a scalar.
  void backward();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Creates the result node; records parents and the backward closure only
/// when some input requires grad and recording is enabled.
Tensor make_result(const Shape& shape, Buffer value,
                   const std::vector<Tensor>& inputs, std::function<void(Node&)> backward);

}  // namespace docgeo::nn
