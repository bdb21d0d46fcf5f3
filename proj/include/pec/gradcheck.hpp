#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pec/ops.hpp"
#include "pec/weights.hpp"

namespace pec {

// Central finite-difference verification of reverse-mode gradients.
// Programs are expressed as a callable building a scalar root from leaf
// tensors on a fresh tape; the checker re-runs the forward once per
// perturbed element, so keep shapes small.
struct GradCheckResult {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int worst_input = -1;
  std::int64_t worst_element = -1;
};

using ScalarProgram =
    std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

inline GradCheckResult gradcheck(const ScalarProgram& program,
                                 std::vector<Tensor<double>> inputs,
                                 double step = 1e-5) {
  for (auto& in : inputs) in.requires_grad = true;

  auto eval = [&](std::vector<Tensor<double>>& ins) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    vars.reserve(ins.size());
    for (auto& t : ins) vars.push_back(tape.leaf(&t));
    Var<double> root = program(tape, vars);
    return root.value().data[0];
  };

  // Analytic pass.
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (auto& t : inputs) {
      t.zero_grad();
      vars.push_back(tape.leaf(&t));
    }
    Var<double> root = program(tape, vars);
    tape.backward(root);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    t.ensure_grad();
    analytic.push_back(t.grad);
  }

  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
      const double keep = inputs[k].data[i];
      inputs[k].data[i] = keep + step;
      const double fp = eval(inputs);
      inputs[k].data[i] = keep - step;
      const double fm = eval(inputs);
      inputs[k].data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
        res.worst_input = static_cast<int>(k);
        res.worst_element = static_cast<std::int64_t>(i);
      }
    }
  }
  return res;
}

// Variant for programs that read their leaves in place (weight stores
// inside composite blocks). `build` must construct the scalar root on the
// given tape from the pointed-to tensors; the checker perturbs them
// element by element.
inline GradCheckResult gradcheck_fn(const std::function<Var<double>(Tape<double>&)>& build,
                                    const std::vector<Tensor<double>*>& leaves,
                                    double step = 1e-5) {
  for (auto* t : leaves) {
    t->requires_grad = true;
    t->zero_grad();
  }
  {
    Tape<double> tape;
    Var<double> root = build(tape);
    tape.backward(root);
  }
  std::vector<std::vector<double>> analytic;
  for (auto* t : leaves) {
    t->ensure_grad();
    analytic.push_back(t->grad);
  }
  auto value = [&]() {
    Tape<double> tape;
    return build(tape).value().data[0];
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    for (std::size_t i = 0; i < leaves[k]->data.size(); ++i) {
      const double keep = leaves[k]->data[i];
      leaves[k]->data[i] = keep + step;
      const double fp = value();
      leaves[k]->data[i] = keep - step;
      const double fm = value();
      leaves[k]->data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
        res.worst_input = static_cast<int>(k);
        res.worst_element = static_cast<std::int64_t>(i);
      }
    }
  }
  return res;
}

inline std::vector<Tensor<double>*> trainable_leaves(WeightStore<double>& store) {
  std::vector<Tensor<double>*> out;
  for (auto& e : store.entries())
    if (e.trainable) out.push_back(&e.tensor);
  return out;
}

}  // namespace pec
