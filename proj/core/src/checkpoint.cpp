#include "moetune/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace moetune {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  return json{{"n_layers", c.n_layers},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"total_experts", c.total_experts},
              {"active_experts", c.active_experts},
              {"ffn_style", c.ffn_style == FfnStyle::gated_three_matrix ? "gated-three-matrix"
                                                                        : "two-matrix"},
              {"n_kv_heads", c.n_kv_heads},
              {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.vocab_size = j.at("vocab_size");
  c.max_seq_len = j.at("max_seq_len");
  c.total_experts = j.at("total_experts");
  c.active_experts = j.at("active_experts");
  c.ffn_style = j.at("ffn_style") == "gated-three-matrix" ? FfnStyle::gated_three_matrix
                                                          : FfnStyle::two_matrix;
  c.n_kv_heads = j.value("n_kv_heads", std::size_t{0});
  c.tie_embeddings = j.value("tie_embeddings", false);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"warmup_steps", c.warmup_steps},
              {"batch_size", c.batch_size},
              {"grad_accum_steps", c.grad_accum_steps},
              {"epochs", c.epochs},
              {"max_steps", c.max_steps},
              {"cutoff_len", c.cutoff_len},
              {"alpha", c.alpha},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"stage", stage_name(c.stage)},
              {"target_task_loss", c.target_task_loss}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.warmup_steps = j.at("warmup_steps");
  c.batch_size = j.at("batch_size");
  c.grad_accum_steps = j.at("grad_accum_steps");
  c.epochs = j.at("epochs");
  c.max_steps = j.at("max_steps");
  c.cutoff_len = j.at("cutoff_len");
  c.alpha = j.at("alpha");
  c.weight_decay = j.at("weight_decay");
  c.seed = j.at("seed");
  c.stage = stage_from_name(j.at("stage"));
  c.target_task_loss = j.at("target_task_loss");
  return c;
}

void append_f32(std::string& blob, const std::vector<double>& values) {
  for (double v : values) {
    const float f = static_cast<float>(v);
    char buf[sizeof(float)];
    std::memcpy(buf, &f, sizeof(float));
    blob.append(buf, sizeof(float));
  }
}

void append_f64(std::string& blob, const std::vector<double>& values) {
  for (double v : values) {
    char buf[sizeof(double)];
    std::memcpy(buf, &v, sizeof(double));
    blob.append(buf, sizeof(double));
  }
}

std::vector<double> read_f32(const std::string& blob, std::size_t offset, std::size_t count) {
  if (offset + count * sizeof(float) > blob.size()) {
    throw std::runtime_error("checkpoint: truncated data section");
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, blob.data() + offset + i * sizeof(float), sizeof(float));
    out[i] = static_cast<double>(f);
  }
  return out;
}

std::vector<double> read_f64(const std::string& blob, std::size_t offset, std::size_t count) {
  if (offset + count * sizeof(double) > blob.size()) {
    throw std::runtime_error("checkpoint: truncated data section");
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::memcpy(&out[i], blob.data() + offset + i * sizeof(double), sizeof(double));
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Transformer& model,
                     const CheckpointMeta& meta) {
  json manifest = json::array();
  std::string blob;

  auto add_entry = [&](const std::string& name, const std::vector<std::size_t>& shape,
                       const std::vector<double>& values, const char* dtype) {
    manifest.push_back(
        {{"name", name}, {"shape", shape}, {"offset", blob.size()}, {"dtype", dtype}});
    if (std::string(dtype) == "f32") {
      append_f32(blob, values);
    } else {
      append_f64(blob, values);
    }
  };

  for (const auto& [name, t] : model.named_parameters()) {
    add_entry(name, t.shape(), t.data(), "f32");
  }
  // Optimizer moments (f64) make mid-training resume exact.
  for (const auto& [pname, slot] : meta.opt_state) {
    add_entry("optim/m/" + pname, {slot.m.size()}, slot.m, "f64");
    add_entry("optim/v/" + pname, {slot.v.size()}, slot.v, "f64");
  }

  json header = {{"format_version", kCheckpointFormatVersion},
                 {"model_config", config_to_json(model.config())},
                 {"is_moe", model.is_moe()},
                 {"step", meta.step},
                 {"stage", meta.stage.empty() ? "init" : meta.stage},
                 {"rng_state", meta.rng_state},
                 {"manifest", manifest}};
  if (meta.train_config) header["train_config"] = train_config_to_json(*meta.train_config);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << header.dump() << "\n" << blob;
}

Transformer load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error("load_checkpoint: missing header");
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("load_checkpoint: corrupt header: ") + e.what());
  }
  const int version = header.at("format_version");
  if (version != kCheckpointFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format_version " +
                             std::to_string(version));
  }
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  const ModelConfig cfg = config_from_json(header.at("model_config"));
  const bool is_moe = header.at("is_moe");

  std::mt19937_64 scratch_rng(0);
  ModelConfig dense_cfg = cfg;
  dense_cfg.total_experts = 1;
  dense_cfg.active_experts = 1;
  Transformer model = Transformer::make_dense(dense_cfg, scratch_rng);
  if (is_moe) {
    model = upcycle_from_dense(model, cfg.total_experts, cfg.active_experts, scratch_rng);
  }

  std::map<std::string, json> entries;
  for (const auto& e : header.at("manifest")) entries[e.at("name")] = e;

  for (auto& [name, t] : model.named_parameters()) {
    auto it = entries.find(name);
    if (it == entries.end()) {
      throw std::runtime_error("load_checkpoint: manifest missing parameter " + name);
    }
    const auto shape = it->second.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) {
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": file " +
                               shape_str(shape) + " vs model " + shape_str(t.shape()));
    }
    Tensor tt = t;
    tt.data() = read_f32(blob, it->second.at("offset"), t.size());
  }

  if (meta) {
    meta->model_config = cfg;
    meta->step = header.value("step", std::size_t{0});
    meta->stage = header.value("stage", "init");
    meta->rng_state = header.value("rng_state", "");
    if (header.contains("train_config")) {
      meta->train_config = train_config_from_json(header.at("train_config"));
    }
    meta->opt_state.clear();
    for (const auto& [name, e] : entries) {
      if (name.rfind("optim/m/", 0) == 0) {
        const std::string pname = name.substr(8);
        const std::size_t count = e.at("shape").get<std::vector<std::size_t>>().at(0);
        meta->opt_state[pname].m = read_f64(blob, e.at("offset"), count);
      } else if (name.rfind("optim/v/", 0) == 0) {
        const std::string pname = name.substr(8);
        const std::size_t count = e.at("shape").get<std::vector<std::size_t>>().at(0);
        meta->opt_state[pname].v = read_f64(blob, e.at("offset"), count);
      }
    }
  }
  return model;
}

}  // namespace moetune
