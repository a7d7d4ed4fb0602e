#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moetune/dataset.hpp"
#include "moetune/model.hpp"
#include "moetune/optimizer.hpp"

namespace moetune {

enum class Stage { continual_pretrain, moe_tune };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t batch_size = 8;
  std::size_t grad_accum_steps = 1;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: epochs decide; otherwise total optimizer steps
  std::size_t cutoff_len = 224;
  double alpha = 0.01;  // balance coefficient
  double weight_decay = 0.0;
  unsigned long long seed = 0;
  Stage stage = Stage::continual_pretrain;
  double target_task_loss = 0.0;  // early stop when > 0

  void validate(std::size_t max_seq_len) const;
};

/// Hyperparameters for a full-scale (multi-billion-parameter) run, kept as a
/// named preset; desk-scale runs use the defaults above.
TrainConfig fullscale_defaults(Stage stage);

struct StepRecord {
  std::size_t step = 0;
  Stage stage = Stage::continual_pretrain;
  double task_loss = 0.0;
  double balance_loss = 0.0;
  double combined = 0.0;
  double lr = 0.0;
};

/// Mid-training continuation point: optimizer moments plus RNG state.
struct ResumeState {
  std::size_t next_step = 0;
  std::string rng_state;
  std::map<std::string, AdamW::Slot> opt_state;
};

struct TrainResult {
  std::vector<StepRecord> curve;
  std::size_t steps_run = 0;
  ResumeState final_state;
};

/// Next-token training of the dense model on raw documents; all parameters
/// trainable. Documents are packed into cutoff-length sequences joined by the
/// separator token. stop_step > 0 halts after that absolute step (for resume
/// tests).
TrainResult continual_pretrain(Transformer& model, const std::vector<std::string>& corpus,
                               const TrainConfig& cfg, const ResumeState* resume = nullptr,
                               std::size_t stop_step = 0);

/// Combined task + alpha * balance training of an upcycled model; only
/// experts and routers move, every frozen parameter stays bit-identical.
TrainResult moe_tune(Transformer& model, const std::vector<InstructionExample>& data,
                     const TrainConfig& cfg, const ResumeState* resume = nullptr,
                     std::size_t stop_step = 0);

void write_loss_csv(const std::string& path, const std::vector<StepRecord>& curve);

}  // namespace moetune
