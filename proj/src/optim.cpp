// Copyright 2026 The CUPE Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cupe/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cupe::pipeline {

OneCycle::OneCycle(std::size_t total_steps, const OptimConfig& cfg)
    : total_(std::max<std::size_t>(total_steps, 1)), cfg_(cfg) {
  warmup_ = static_cast<std::size_t>(std::llround(cfg.warmup_fraction * static_cast<double>(total_)));
  warmup_ = std::clamp<std::size_t>(warmup_, 1, total_ > 1 ? total_ - 1 : 1);
}

double OneCycle::phase(std::size_t s, double start, double peak, double end) const {
  auto cosine = [](double a, double b, double pct) { return b + (a - b) * 0.5 * (1.0 + std::cos(std::numbers::pi * pct)); };
  if (s <= warmup_) return cosine(start, peak, static_cast<double>(s) / static_cast<double>(warmup_));
  const std::size_t rest = total_ - 1 - warmup_;
  if (rest == 0) return peak;
  const double pct = std::min(1.0, static_cast<double>(s - warmup_) / static_cast<double>(rest));
  return cosine(peak, end, pct);
}

double OneCycle::lr_factor(std::size_t s) const {
  const double initial = 1.0 / cfg_.div_factor;
  return phase(s, initial, 1.0, initial / cfg_.final_div_factor);
}

double OneCycle::momentum(std::size_t s) const { return phase(s, cfg_.momentum_max, cfg_.momentum_min, cfg_.momentum_max); }

AdamW::AdamW(std::vector<ParamGroup> groups, const OptimConfig& cfg, std::size_t total_steps)
    : groups_(std::move(groups)), cfg_(cfg), schedule_(total_steps, cfg) {}

std::vector<double> AdamW::step() {
  const double beta1 = schedule_.momentum(step_);
  const double beta2 = cfg_.beta2;
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
  std::vector<double> rates;
  for (auto& g : groups_) {
    const double lr = g.peak_lr * schedule_.lr_factor(step_ - 1);
    rates.push_back(lr);
    for (nn::Parameter* p : g.params) {
      if (p->frozen || p->grad.empty()) continue;
      auto& st = state_[p->name];
      if (st.m.empty()) {
        st.m = Tensor(p->value.shape());
        st.v = Tensor(p->value.shape());
      }
      const bool decay = p->value.rank() >= 2 && g.weight_decay > 0.0;
      double* w = p->value.data();
      const double* gr = p->grad.data();
      double* m = st.m.data();
      double* v = st.v.data();
      const std::size_t n = p->value.numel();
      for (std::size_t i = 0; i < n; ++i) {
        if (decay) w[i] -= lr * g.weight_decay * w[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * gr[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * gr[i] * gr[i];
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }
  return rates;
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto* p : g.params) p->zero_grad();
}

void AdamW::save(model::Checkpoint& ckpt) const {
  ckpt.put("optim.step", Tensor::scalar(static_cast<double>(step_)));
  std::vector<std::string> names;
  for (const auto& [name, st] : state_) names.push_back(name);
  std::sort(names.begin(), names.end());
  for (const auto& name : names) {
    ckpt.put("optim.m." + name, state_.at(name).m);
    ckpt.put("optim.v." + name, state_.at(name).v);
  }
}

void AdamW::load(const model::Checkpoint& ckpt) {
  if (const Tensor* s = ckpt.find("optim.step")) step_ = static_cast<std::size_t>(s->item());
  for (const auto& g : groups_)
    for (const auto* p : g.params) {
      const Tensor* m = ckpt.find("optim.m." + p->name);
      const Tensor* v = ckpt.find("optim.v." + p->name);
      if (m && v && m->shape() == p->value.shape() && v->shape() == p->value.shape()) state_[p->name] = {*m, *v};
    }
}

double grad_norm(const nn::ParamList& params) {
  double s = 0.0;
  for (const auto* p : params) {
    if (p->grad.empty()) continue;
    for (double g : p->grad.values()) s += g * g;
  }
  return std::sqrt(s);
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
  const double norm = grad_norm(params);
  const double coef = max_norm / (norm + 1e-6);
  if (coef < 1.0) {
    for (auto* p : params) {
      if (p->grad.empty()) continue;
      for (double& g : p->grad.values()) g *= coef;
    }
  }
  return norm;
}

}  // namespace cupe::pipeline
