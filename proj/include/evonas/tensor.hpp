#pragma once

// Minimal define-by-run reverse-mode autodiff over dense double tensors.
//
// Every op that receives at least one gradient-tracking input (while grad mode
// is enabled) records a Node on its result. backward() walks the recorded
// nodes in reverse topological order and accumulates into `grad` buffers.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evonas/errors.hpp"

namespace evonas {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// Reads the output gradient from `out` and accumulates into its inputs.
using BackwardFn = std::function<void(const TensorImpl& out)>;

struct Node {
  std::string_view kind;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::shared_ptr<Node> creator;

  // Zero-filled on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  // Leaf that tracks gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }
  bool is_leaf() const { return impl_->creator == nullptr; }

  // Same values, no history, no gradient tracking.
  Tensor detach() const;
  // Deep copy as a leaf, keeping requires_grad.
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

  // Builds an op result. Records `backward` only when grad mode is on and
  // some input requires gradients.
  static Tensor from_op(Shape shape, std::vector<double> data, std::string_view kind,
                        std::initializer_list<const Tensor*> inputs, BackwardFn backward);
  static Tensor from_op(Shape shape, std::vector<double> data, std::string_view kind,
                        const std::vector<Tensor>& inputs, BackwardFn backward);

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Topologically ordered record of one backward traversal.
class Graph {
 public:
  struct Entry {
    std::string_view kind;  // "leaf" for tensors without a creator
    std::vector<std::size_t> inputs;
    std::size_t visits = 0;
  };

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  friend Graph backward(const Tensor& loss);
  std::vector<Entry> entries_;
};

// Seeds d(loss)/d(loss) = 1 and propagates. Leaf gradients accumulate.
Graph backward(const Tensor& loss);

// Ordered name -> tensor map holding every learned weight of a model.
class ParameterStore {
 public:
  Tensor& add(std::string name, Tensor tensor);
  bool contains(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace evonas
