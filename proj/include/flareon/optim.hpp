#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flareon/error.hpp"
#include "flareon/tensor.hpp"

namespace flareon {

/// A trainable tensor with its momentum buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor velocity;
};

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Momentum SGD, in place:
///   v <- momentum * v + grad + weight_decay * theta
///   theta <- theta - lr * v
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves all parameters and buffers untouched.
inline void sgd_step(std::span<Parameter> params, std::span<const Tensor> grads, const SgdOptions& opt) {
  expect(params.size() == grads.size(), "sgd_step: ", grads.size(), " gradients for ", params.size(), " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    expect(params[i].value.shape() == grads[i].shape(), "sgd_step: gradient for '", params[i].name, "' has shape ",
           shape_string(grads[i].shape()), ", parameter is ", shape_string(params[i].value.shape()));
    if (!grads[i].all_finite())
      throw NonFiniteError(detail::concat("sgd_step: non-finite gradient for '", params[i].name, "'; step aborted"));
  }
  const auto lr = static_cast<float>(opt.lr);
  const auto mu = static_cast<float>(opt.momentum);
  const auto wd = static_cast<float>(opt.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (p.velocity.shape() != p.value.shape()) p.velocity = Tensor(p.value.shape());
    float* theta = p.value.data();
    float* v = p.velocity.data();
    const float* g = grads[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      v[j] = mu * v[j] + g[j] + wd * theta[j];
      theta[j] -= lr * v[j];
    }
  }
}

}  // namespace flareon
