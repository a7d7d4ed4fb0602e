#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "moetune/tensor.hpp"

namespace moetune {

/// Decoupled-weight-decay adaptive-moment optimizer with bias correction.
/// Parameters whose freeze flag is set are never touched, not even by decay.
class AdamW {
 public:
  struct Config {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  struct Slot {
    std::vector<double> m, v;
  };

  AdamW(std::vector<std::pair<std::string, Tensor>> params, Config cfg,
        const std::map<std::string, bool>* freeze_mask = nullptr);

  /// One update using the gradients currently on the parameters. A missing
  /// gradient counts as zero (decay still applies).
  void step(double lr);
  void zero_grad();

  std::size_t step_count() const { return t_; }
  const std::map<std::string, Slot>& state() const { return state_; }
  void restore_state(std::map<std::string, Slot> state, std::size_t step_count);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<bool> frozen_;
  Config cfg_;
  std::map<std::string, Slot> state_;
  std::size_t t_ = 0;
};

/// Warmup then cosine decay to zero over total_steps.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps,
                 std::size_t warmup_steps);

}  // namespace moetune
