#include "moetune/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace moetune {

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, Config cfg,
             const std::map<std::string, bool>* freeze_mask)
    : params_(std::move(params)), cfg_(cfg) {
  frozen_.reserve(params_.size());
  for (const auto& [name, t] : params_) {
    (void)t;
    bool frozen = false;
    if (freeze_mask) {
      auto it = freeze_mask->find(name);
      frozen = it != freeze_mask->end() && it->second;
    }
    frozen_.push_back(frozen);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    if (frozen_[pi]) continue;
    auto& [name, p] = params_[pi];
    auto& slot = state_[name];
    auto& data = p.data();
    if (slot.m.empty()) {
      slot.m.assign(data.size(), 0.0);
      slot.v.assign(data.size(), 0.0);
    }
    const bool has_grad = p.has_grad();
    const auto& g = has_grad ? p.grad() : slot.m;  // unused when !has_grad
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * gi;
      slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      double x = data[i];
      x -= lr * cfg_.weight_decay * x;
      x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      data[i] = apply_precision(x);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) {
    (void)name;
    p.zero_grad();
  }
}

void AdamW::restore_state(std::map<std::string, Slot> state, std::size_t step_count) {
  state_ = std::move(state);
  t_ = step_count;
}

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps,
                 std::size_t warmup_steps) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be positive");
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const double span = static_cast<double>(total_steps > warmup_steps ? total_steps - warmup_steps : 1);
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace moetune
