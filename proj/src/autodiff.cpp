#include "bbg/autodiff.hpp"

#include "bbg/error.hpp"

namespace bbg {

const Tensor& Var::value() const {
  require(tape_ != nullptr, ErrorCode::kState, "use of unbound Var");
  return tape_->value(*this);
}

const Tensor& Gradients::at(Var v) const {
  auto it = by_id_.find(v.id());
  require(it != by_id_.end(), ErrorCode::kState,
          "no gradient recorded for node " + std::to_string(v.id()));
  return it->second;
}

Var Tape::leaf(Tensor value, bool trainable) {
  require(value.all_finite(), ErrorCode::kNonFinite, "non-finite leaf value");
  Node node;
  node.value = std::move(value);
  node.requires_grad = trainable;
  node.trainable_leaf = trainable;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn fn) {
  require(value.all_finite(), ErrorCode::kNonFinite,
          "op produced non-finite values (shape " +
              shape_string(value.shape()) + ")");
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    require(&in.tape() == this, ErrorCode::kState, "Var from another tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(Var loss) const {
  require(&loss.tape() == this, ErrorCode::kState, "loss from another tape");
  const Node& root = nodes_[loss.id()];
  require(root.value.size() == 1, ErrorCode::kShapeMismatch,
          "backward() needs a scalar loss, got " +
              shape_string(root.value.shape()));
  require(root.requires_grad, ErrorCode::kState,
          "loss is detached from every trainable leaf");

  std::vector<Tensor> grads(loss.id() + 1);
  grads[loss.id()] = Tensor(root.value.shape(), 1.0);
  std::vector<Tensor*> slots;

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (grads[i].empty() || !node.backward) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t in = node.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape());
      slots[k] = &grads[in];
    }
    node.backward(grads[i], slots);
    if (!node.trainable_leaf) grads[i] = Tensor();
  }

  Gradients out;
  for (std::size_t i = 0; i <= loss.id(); ++i) {
    if (!nodes_[i].trainable_leaf) continue;
    out.by_id_[i] = grads[i].empty() ? Tensor(nodes_[i].value.shape())
                                     : std::move(grads[i]);
  }
  for (std::size_t i = loss.id() + 1; i < nodes_.size(); ++i)
    if (nodes_[i].trainable_leaf)
      out.by_id_[i] = Tensor(nodes_[i].value.shape());
  return out;
}

}  // namespace bbg
