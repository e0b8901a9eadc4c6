#pragma once

// Dense row-major tensors and the reverse-mode gradient tape.
//
// A Tensor is a shared handle to a storage block (shape, values, gradient).
// Every primitive whose inputs require a gradient appends one node to the
// thread-local Tape; nodes are therefore stored in topological order, and
// backward() walks them once in reverse.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sdd/errors.hpp"

namespace sdd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
class Tape;

template <class T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  // Set when the storage is the output of a recorded node.
  std::optional<std::size_t> node;
  std::uint64_t tape_generation = 0;
  const Tape<T>* tape = nullptr;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() : s_(std::make_shared<TensorStorage<T>>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<TensorStorage<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimension must be positive: " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw DimensionError("shape " + to_string(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t size() const { return s_->data.size(); }

  std::span<const T> data() const& { return s_->data; }
  std::span<const T> data() const&& = delete;  // would dangle if this handle is the last owner
  // Writable access is intended for parameter updates and fixtures only.
  std::span<T> mutable_data() { return s_->data; }
  const std::vector<T>& values() const& { return s_->data; }
  std::vector<T> values() const&& { return s_->data; }

  // Empty until a backward pass reaches this tensor.
  std::span<const T> grad() const { return s_->grad; }
  bool has_grad() const { return s_->grad.size() == s_->data.size() && !s_->data.empty(); }
  void zero_grad() { s_->grad.assign(s_->data.size(), T(0)); }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  std::optional<std::size_t> node_id() const { return s_->node; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return s_->data[0];
  }

  T operator[](std::size_t i) const { return s_->data[i]; }

  // Fresh storage holding a copy of the values; never on the tape.
  Tensor detach() const { return Tensor(s_->shape, s_->data, false); }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage<T>> s_;
};

template <class T>
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorStorage<T>>> inputs;
    std::shared_ptr<TensorStorage<T>> output;
    std::function<void(Node&)> backward;
  };

  // One tape per thread; tapes are never shared across workers.
  static Tape& active() {
    thread_local Tape tape;
    return tape;
  }

  std::size_t record(std::string op, std::vector<std::shared_ptr<TensorStorage<T>>> inputs,
                     const std::shared_ptr<TensorStorage<T>>& output,
                     std::function<void(Node&)> backward) {
    const std::size_t id = nodes_.size();
    output->node = id;
    output->tape = this;
    output->tape_generation = generation_;
    nodes_.push_back(Node{std::move(op), std::move(inputs), output, std::move(backward)});
    return id;
  }

  void backward(const Tensor<T>& loss) {
    const auto& s = loss.storage();
    if (loss.size() != 1) {
      throw TapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!s->node || s->tape != this || s->tape_generation != generation_) {
      throw TapeError("backward() on a tensor that is not recorded on the active tape");
    }
    if (consumed_) throw TapeError("backward() called twice without reset()");
    consumed_ = true;
    last_visits_ = 0;
    s->ensure_grad();
    s->grad[0] += T(1);
    for (std::size_t i = *s->node + 1; i-- > 0;) {
      Node& n = nodes_[i];
      ++last_visits_;
      if (n.output->grad.empty()) continue;
      n.backward(n);
    }
  }

  // Drops every node. Leaf gradients are kept; zero them separately.
  void reset() {
    for (auto& n : nodes_) n.output->node.reset();
    nodes_.clear();
    consumed_ = false;
    ++generation_;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t last_visit_count() const { return last_visits_; }

 private:
  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t generation_ = 1;
  std::size_t last_visits_ = 0;
};

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>::active().backward(loss);
}

namespace detail {

// Wraps `out` as the result of `op`. If any input requires a gradient, the
// result joins the tape and `bwd` is invoked during backward with the node.
template <class T>
Tensor<T> record(std::string op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out,
                 std::function<void(typename Tape<T>::Node&)> bwd) {
  bool needs = false;
  for (const auto* in : inputs) needs = needs || in->requires_grad();
  if (!needs) return out;
  std::vector<std::shared_ptr<TensorStorage<T>>> parents;
  parents.reserve(inputs.size());
  for (const auto* in : inputs) parents.push_back(in->storage());
  out.set_requires_grad(true);
  Tape<T>::active().record(std::move(op), std::move(parents), out.storage(), std::move(bwd));
  return out;
}

// Gradient buffer of a parent that wants one, else nullptr.
template <class T>
T* grad_of(typename Tape<T>::Node& n, std::size_t i) {
  auto& p = n.inputs[i];
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

}  // namespace detail

}  // namespace sdd
