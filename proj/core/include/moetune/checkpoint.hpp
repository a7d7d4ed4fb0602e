#pragma once

#include <optional>
#include <string>

#include "moetune/model.hpp"
#include "moetune/trainer.hpp"

namespace moetune {

constexpr int kCheckpointFormatVersion = 1;

/// Checkpoint header contents beyond the parameter manifest.
struct CheckpointMeta {
  ModelConfig model_config;
  std::optional<TrainConfig> train_config;
  std::size_t step = 0;
  std::string stage;  // "continual-pretrain" | "moe-tune" | "init"
  std::string rng_state;
  std::map<std::string, AdamW::Slot> opt_state;  // optional, for resume
};

/// Container layout: one JSON header line (format version, config, manifest
/// of name -> shape/offset), a newline, then little-endian float32 arrays in
/// manifest order. Offsets are relative to the first byte after the newline.
/// Round trips are bit-exact in f32 mode.
void save_checkpoint(const std::string& path, const Transformer& model,
                     const CheckpointMeta& meta);

Transformer load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);

}  // namespace moetune
