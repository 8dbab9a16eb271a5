#ifndef VOXSEG_TENSOR_HPP
#define VOXSEG_TENSOR_HPP

#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "voxseg/common.hpp"

namespace voxseg {

// Dense tensor, canonically 5-D (N, C, D, H, W). Values are immutable once an
// op has produced them; the grad buffer is the only mutable part and is touched
// exclusively by the backward pass. The handle is cheap to copy and shares
// storage.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
    check(voxseg::numel(shape) == static_cast<int64_t>(values.size()), ErrorKind::Shape,
          "tensor: " + std::to_string(values.size()) + " values do not fill shape " +
              shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  size_t ndim() const { return impl_->shape.size(); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    if (!rg) {
      impl_->grad.clear();
      impl_->grad.shrink_to_fit();
    }
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  // Allocates on first use; only legal on requires_grad tensors.
  std::vector<T>& grad() {
    check(impl_->requires_grad, ErrorKind::Config, "grad requested on a no-grad tensor");
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  const std::vector<T>& grad_ref() const { return impl_->grad; }

  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // 5-D convenience accessors.
  int64_t n() const { return dim(0); }
  int64_t c() const { return dim(1); }
  int64_t d() const { return dim(2); }
  int64_t h() const { return dim(3); }
  int64_t w() const { return dim(4); }
  int64_t spatial_numel() const { return dim(2) * dim(3) * dim(4); }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty unless requires_grad and backward has run
    bool requires_grad = false;
  };

  Tensor(Shape shape, bool requires_grad) {
    impl_ = std::make_shared<Impl>();
    impl_->data.assign(static_cast<size_t>(voxseg::numel(shape)), T(0));
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<Impl> impl_;
};

// Tape of operation records in execution order, which is topological by
// construction. backward() sweeps the records exactly once in reverse,
// accumulating gradients additively (repeated calls keep accumulating).
template <typename T>
class Graph {
 public:
  void record(const char* op_name, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward_fn) {
    records_.push_back(Record{op_name, std::move(inputs), std::move(output),
                              std::move(backward_fn)});
  }

  void backward(Tensor<T>& loss) {
    check(loss.defined() && loss.numel() == 1, ErrorKind::Shape,
          "backward: loss must be a scalar tensor, got " +
              (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    check(loss.requires_grad(), ErrorKind::Config,
          "backward: loss does not require grad (nothing to differentiate)");
    // Reset intermediate grads so a repeated call re-propagates from scratch;
    // leaf gradients (parameters) keep accumulating additively.
    for (auto& rec : records_) rec.output.zero_grad();
    loss.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output.requires_grad() || !it->output.has_grad()) continue;
      it->backward();
    }
  }

  size_t size() const { return records_.size(); }
  const char* op_name(size_t i) const { return records_.at(i).name; }
  void clear() { records_.clear(); }

 private:
  struct Record {
    const char* name;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };
  std::vector<Record> records_;
};

// Marks the output of an op: gradients flow only when a tape is attached and
// at least one input participates in differentiation.
template <typename T>
bool tracks_grad(const Graph<T>* g, std::initializer_list<const Tensor<T>*> inputs) {
  if (!g) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

}  // namespace voxseg

#endif  // VOXSEG_TENSOR_HPP
