#include "evonas/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace evonas {

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
  for (std::size_t extent : shape)
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != data.size())
    throw ShapeError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.impl_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() needs a single-element tensor, shape is " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("requires_grad can only be toggled on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
  Tensor t(impl_->shape, impl_->data);
  t.impl_->requires_grad = impl_->requires_grad;
  return t;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::string_view kind,
                       std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool track = false;
  for (const Tensor* in : inputs) track = track || in->requires_grad();
  if (!track) return out;
  auto node = std::make_shared<Node>();
  node->kind = kind;
  for (const Tensor* in : inputs) node->inputs.push_back(in->impl_);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->creator = std::move(node);
  return out;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::string_view kind,
                       const std::vector<Tensor>& inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!g_grad_enabled) return out;
  bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!track) return out;
  auto node = std::make_shared<Node>();
  node->kind = kind;
  for (const Tensor& in : inputs) node->inputs.push_back(in.impl_);
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->creator = std::move(node);
  return out;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

Graph backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any gradient-tracking tensor");

  // Iterative post-order DFS gives inputs before consumers.
  std::vector<TensorImpl*> order;
  std::unordered_map<TensorImpl*, std::size_t> position;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
  std::unordered_map<TensorImpl*, bool> seen{{loss.impl().get(), true}};
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const Node* node = impl->creator.get();
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].get();
      if (child->requires_grad && !seen[child]) {
        seen[child] = true;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    position[impl] = order.size();
    order.push_back(impl);
    stack.pop_back();
  }

  Graph graph;
  graph.entries_.resize(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& entry = graph.entries_[i];
    const Node* node = order[i]->creator.get();
    entry.kind = node ? node->kind : std::string_view("leaf");
    if (node)
      for (const auto& in : node->inputs)
        if (auto it = position.find(in.get()); it != position.end()) entry.inputs.push_back(it->second);
  }

  loss.impl()->grad_buffer()[0] += 1.0;
  for (std::size_t i = order.size(); i-- > 0;) {
    TensorImpl* impl = order[i];
    ++graph.entries_[i].visits;
    if (impl->creator && !impl->grad.empty()) impl->creator->backward(*impl);
  }
  return graph;
}

Tensor& ParameterStore::add(std::string name, Tensor tensor) {
  if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
  index_.emplace(name, items_.size());
  items_.emplace_back(std::move(name), std::move(tensor));
  return items_.back().second;
}

bool ParameterStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const Tensor& ParameterStore::at(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("no parameter named '" + std::string(name) + "'");
  return items_[it->second].second;
}

Tensor& ParameterStore::at(std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this).at(name));
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

}  // namespace evonas
