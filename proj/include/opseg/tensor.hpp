/* Copyright 2026 The Opseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef OPSEG_TENSOR_HPP_
#define OPSEG_TENSOR_HPP_

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace opseg {

class Tensor;

namespace detail {

// One recorded operation of the dynamic graph. `apply` scatters the output's
// gradient into the parents' gradients; it runs exactly once during backward.
struct Node {
  std::vector<Tensor> parents;
  std::function<void()> apply;
};

struct Storage {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // null for leaves and untracked results
};

}  // namespace detail

// Dense n-dimensional double tensor with reverse-mode autodiff. Copying a
// Tensor copies the handle, not the buffer; graphs and their tensors belong
// to one thread during forward/backward, untracked tensors are freely
// shareable read-only.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);
  Tensor(std::vector<int> shape, std::vector<double> values,
         bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return s_->values.size(); }

  std::vector<double>& values() { return s_->values; }
  const std::vector<double>& values() const { return s_->values; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool b) { s_->requires_grad = b; }

  // Gradient buffer, zero-allocated on first use.
  std::vector<double>& grad();
  bool has_grad() const { return !s_->grad.empty(); }
  void zero_grad();

  void accumulate_grad(const std::vector<double>& g);

  // True when a backward pass would reach this tensor.
  bool tracked() const { return s_->requires_grad || s_->node != nullptr; }

  void set_node(std::shared_ptr<detail::Node> n) { s_->node = std::move(n); }
  const std::shared_ptr<detail::Node>& node() const { return s_->node; }
  detail::Storage* id() const { return s_.get(); }

 private:
  std::shared_ptr<detail::Storage> s_;
};

// Thread-local switch that disables graph recording (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Reverse-mode pass from a scalar loss. Visits every recorded operation
// exactly once in reverse topological order, then frees the graph.
void backward(const Tensor& loss);

// Central finite-difference audit of d(sum_i r_i * f(x)_i)/dx against the
// recorded gradients, with a fixed random projection r. Returns the worst
// relative error over all elements of x (denominators floored at 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor input,
                  double eps = 1e-5);

void check_finite(const Tensor& t, const std::string& what);

}  // namespace opseg

#endif  // OPSEG_TENSOR_HPP_
