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
#include "opseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "opseg/rng.hpp"

namespace opseg {

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("tensor: non-positive extent " + std::to_string(e));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

thread_local int g_no_grad_depth = 0;

}  // namespace

Tensor::Tensor(std::vector<int> shape, bool requires_grad)
    : s_(std::make_shared<detail::Storage>()) {
  s_->values.assign(shape_numel(shape), 0.0);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<detail::Storage>()) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape/value count mismatch (" +
                                std::to_string(shape_numel(shape)) + " vs " +
                                std::to_string(values.size()) + ")");
  s_->shape = std::move(shape);
  s_->values = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar");
  return s_->values[0];
}

std::vector<double>& Tensor::grad() {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() { s_->grad.clear(); }

void Tensor::accumulate_grad(const std::vector<double>& g) {
  if (g.size() != s_->values.size())
    throw std::invalid_argument("tensor: gradient shape mismatch");
  auto& dst = grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar");

  // Iterative post-order DFS gives the topological order of recorded nodes.
  std::vector<Tensor> order;
  std::unordered_set<detail::Storage*> visited;
  struct Frame {
    Tensor t;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (loss.node()) {
    stack.push_back({loss, 0});
    visited.insert(loss.id());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto& parents = f.t.node()->parents;
    if (f.next_parent < parents.size()) {
      Tensor p = parents[f.next_parent++];
      if (p.node() && !visited.count(p.id())) {
        visited.insert(p.id());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  Tensor l = loss;
  l.grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->node()->apply();
  }
  // Graph is single-use; free it.
  for (auto& t : order) t.set_node(nullptr);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor input,
                  double eps) {
  Rng rng(0x6f70736567ull);  // fixed projection, independent of the caller

  Tensor probe = f(input);
  std::vector<double> r(probe.numel());
  for (auto& v : r) v = rng.uniform(-1.0, 1.0);

  auto project = [&](const Tensor& t) {
    double s = 0.0;
    const auto& vals = t.values();
    for (std::size_t i = 0; i < vals.size(); ++i) s += r[i] * vals[i];
    return s;
  };

  // Analytic gradient of the projected scalar.
  input.zero_grad();
  input.set_requires_grad(true);
  Tensor out = f(input);
  if (out.numel() != probe.numel())
    throw std::invalid_argument("grad_check: f output size is input-dependent");
  Tensor proj({1});
  {
    auto node = std::make_shared<detail::Node>();
    node->parents = {out};
    Tensor o = out;
    Tensor p = proj;
    const std::vector<double>* rw = &r;
    node->apply = [o, p, rw]() mutable {
      double up = p.grad()[0];
      auto& g = o.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * (*rw)[i];
    };
    proj.values()[0] = project(out);
    proj.set_node(node);
  }
  backward(proj);
  std::vector<double> analytic = input.grad();

  double worst = 0.0;
  NoGradGuard ng;
  auto& x = input.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    double hi = project(f(input));
    x[i] = saved - eps;
    double lo = project(f(input));
    x[i] = saved;
    double numeric = (hi - lo) / (2.0 * eps);
    double denom = std::max({1e-8, std::abs(analytic[i]), std::abs(numeric)});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  input.set_requires_grad(false);
  input.zero_grad();
  return worst;
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double v : t.values())
    if (!std::isfinite(v))
      throw std::runtime_error(what + ": non-finite value in result");
}

}  // namespace opseg
