#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "bbg/tensor.hpp"

namespace bbg {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

// Receives the output gradient and adds the input gradients into the given
// buffers. A buffer is null when that input does not require a gradient.
using BackwardFn =
    std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Gradients {
 public:
  bool contains(Var v) const { return by_id_.count(v.id()) != 0; }
  const Tensor& at(Var v) const;
  std::size_t size() const { return by_id_.size(); }

 private:
  friend class Tape;
  std::unordered_map<std::size_t, Tensor> by_id_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool trainable = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op output. Throws kNonFinite if the value has NaN/Inf.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode sweep from a scalar loss. Every trainable leaf gets an entry
  // (zeros when the loss does not depend on it).
  Gradients backward(Var loss) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable_leaf = false;
  };

  // deque keeps references returned by value() stable across record().
  std::deque<Node> nodes_;
};

}  // namespace bbg
