#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pec/tensor.hpp"

namespace pec {

template <typename T>
class Tape;

// Lightweight handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

// Arena of forward values plus their backward rules, in topological
// order by construction. Leaves may live outside the tape (weights,
// inputs); their gradients accumulate into the external tensor so an
// optimizer can read them after the tape is gone. A tape belongs to a
// single thread of execution.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Var<T> leaf(Tensor<T>* external) {
    Slot s;
    s.ext = external;
    s.needs_grad = external->requires_grad;
    slots_.push_back(std::move(s));
    return {this, static_cast<int>(slots_.size()) - 1};
  }

  // Owned value with no inputs (constants, targets).
  Var<T> constant(Tensor<T> t) {
    Slot s;
    s.own = std::move(t);
    s.needs_grad = false;
    slots_.push_back(std::move(s));
    return {this, static_cast<int>(slots_.size()) - 1};
  }

  Var<T> emit(Tensor<T> out, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    Slot s;
    s.own = std::move(out);
    s.backward = std::move(fn);
    for (const auto& in : inputs) {
      if (in.tape != this) throw ConfigError("op inputs must come from the same tape");
      if (slot(in.id).needs_grad) s.needs_grad = true;
    }
    slots_.push_back(std::move(s));
    return {this, static_cast<int>(slots_.size()) - 1};
  }

  Tensor<T>& value(int id) {
    Slot& s = slot(id);
    return s.ext ? *s.ext : s.own;
  }
  const Tensor<T>& value(int id) const {
    const Slot& s = slots_.at(static_cast<std::size_t>(id));
    return s.ext ? *s.ext : s.own;
  }

  bool needs_grad(int id) const { return slots_.at(static_cast<std::size_t>(id)).needs_grad; }

  // Gradient buffer for a slot, allocated on demand. For external leaves
  // this is the external tensor's grad field.
  std::vector<T>& grad(int id) {
    Slot& s = slot(id);
    if (s.ext) {
      s.ext->ensure_grad();
      return s.ext->grad;
    }
    if (s.grad.size() != s.own.data.size()) s.grad.assign(s.own.data.size(), T(0));
    return s.grad;
  }

  // Reverse sweep from a scalar root. Internal gradients are reset each
  // call; external leaf gradients accumulate across calls.
  void backward(Var<T> root) {
    if (root.tape != this) throw ConfigError("backward root from another tape");
    if (!value(root.id).is_scalar()) {
      throw UsageError(msg("backward root must be a 1x1x1x1 scalar, got ",
                           value(root.id).shape.str()));
    }
    for (auto& s : slots_) s.grad.clear();
    grad(root.id)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Slot& s = slot(i);
      if (s.backward && !s.grad.empty()) s.backward(*this);
    }
  }

  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Tensor<T>* ext = nullptr;
    Tensor<T> own;
    std::vector<T> grad;  // internal slots only
    BackwardFn backward;  // null for leaves/constants
    bool needs_grad = false;
  };

  Slot& slot(int id) { return slots_.at(static_cast<std::size_t>(id)); }

  std::vector<Slot> slots_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace pec
