#include "moetune/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "moetune/autodiff.hpp"
#include "moetune/kernels.hpp"
#include "moetune/tokenizer.hpp"

namespace moetune {

std::string stage_name(Stage s) {
  return s == Stage::continual_pretrain ? "continual-pretrain" : "moe-tune";
}

Stage stage_from_name(const std::string& name) {
  if (name == "continual-pretrain") return Stage::continual_pretrain;
  if (name == "moe-tune") return Stage::moe_tune;
  throw std::invalid_argument("unknown stage: " + name);
}

void TrainConfig::validate(std::size_t max_seq_len) const {
  if (learning_rate <= 0.0 || batch_size == 0 || grad_accum_steps == 0) {
    throw std::invalid_argument("TrainConfig: rates and sizes must be positive");
  }
  if (alpha < 0.0) throw std::invalid_argument("TrainConfig: alpha must be >= 0");
  if (cutoff_len > max_seq_len) {
    throw std::invalid_argument("TrainConfig: cutoff length exceeds model max_seq_len");
  }
}

TrainConfig fullscale_defaults(Stage stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  cfg.learning_rate = 1e-5;
  cfg.warmup_steps = 0;
  cfg.cutoff_len = 2048;
  if (stage == Stage::continual_pretrain) {
    cfg.batch_size = 64;
    cfg.grad_accum_steps = 16;
    cfg.epochs = 2;
  } else {
    cfg.batch_size = 8;
    cfg.grad_accum_steps = 8;
    cfg.epochs = 3;
  }
  return cfg;
}

namespace {

// Deterministic example order: per-epoch shuffle keyed on seed + epoch, so a
// resumed run sees exactly the sequence an uninterrupted run would.
std::vector<std::size_t> epoch_order(std::size_t n, unsigned long long seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + epoch + 1);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct LoopPlan {
  std::size_t total_steps = 0;
  std::size_t examples_per_step = 0;
  std::size_t steps_per_epoch = 0;
};

LoopPlan plan_loop(std::size_t n_examples, const TrainConfig& cfg) {
  LoopPlan p;
  p.examples_per_step = cfg.batch_size * cfg.grad_accum_steps;
  p.steps_per_epoch = std::max<std::size_t>(1, n_examples / p.examples_per_step);
  // Zero epochs with no step cap is a valid no-op run.
  p.total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * p.steps_per_epoch;
  return p;
}

std::vector<std::size_t> step_examples(const LoopPlan& plan, const TrainConfig& cfg,
                                       std::size_t n_examples, std::size_t step) {
  const std::size_t epoch = step / plan.steps_per_epoch;
  const std::size_t within = step % plan.steps_per_epoch;
  auto order = epoch_order(n_examples, cfg.seed, epoch);
  std::vector<std::size_t> out;
  out.reserve(plan.examples_per_step);
  for (std::size_t i = 0; i < plan.examples_per_step; ++i) {
    out.push_back(order[(within * plan.examples_per_step + i) % n_examples]);
  }
  return out;
}

std::mt19937_64 make_rng(const TrainConfig& cfg, const ResumeState* resume) {
  std::mt19937_64 rng(cfg.seed);
  if (resume && !resume->rng_state.empty()) {
    std::istringstream is(resume->rng_state);
    is >> rng;
  }
  return rng;
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

TrainResult continual_pretrain(Transformer& model, const std::vector<std::string>& corpus,
                               const TrainConfig& cfg, const ResumeState* resume,
                               std::size_t stop_step) {
  cfg.validate(model.config().max_seq_len);
  if (cfg.stage != Stage::continual_pretrain) {
    throw std::invalid_argument("continual_pretrain: config stage mismatch");
  }
  if (corpus.empty()) throw std::invalid_argument("continual_pretrain: empty corpus");

  // Greedy corpus packing: documents are joined with SEP into cutoff-length
  // sequences so the structural tokens (SEP, EOS) appear as prediction
  // targets; an over-long document simply continues in the next sequence.
  std::vector<std::vector<int>> sequences;
  {
    std::vector<int> cur{tok::kBos};
    auto flush = [&]() {
      if (cur.size() <= 1) return;
      cur.push_back(tok::kEos);
      sequences.push_back(cur);
      cur.assign(1, tok::kBos);
    };
    for (const auto& doc : corpus) {
      if (cur.size() > 1) {
        if (cur.size() + 3 > cfg.cutoff_len) {
          flush();
        } else {
          cur.push_back(tok::kSep);
        }
      }
      for (unsigned char c : doc) {
        if (cur.size() + 1 >= cfg.cutoff_len) flush();
        cur.push_back(c);
      }
    }
    flush();
  }

  AdamW opt(model.named_parameters(), {0.9, 0.99, 1e-8, cfg.weight_decay});
  std::mt19937_64 rng = make_rng(cfg, resume);
  std::size_t start = 0;
  if (resume) {
    opt.restore_state(resume->opt_state, resume->next_step);
    start = resume->next_step;
  }

  const LoopPlan plan = plan_loop(sequences.size(), cfg);
  TrainResult res;
  for (std::size_t step = start; step < plan.total_steps; ++step) {
    if (stop_step > 0 && step >= stop_step) break;
    const double lr = cosine_lr(cfg.learning_rate, step, plan.total_steps, cfg.warmup_steps);
    auto idx = step_examples(plan, cfg, sequences.size(), step);
    opt.zero_grad();
    double step_loss = 0.0;
    for (std::size_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
      std::vector<std::vector<int>> batch;
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        batch.push_back(sequences[idx[micro * cfg.batch_size + i]]);
      }
      Tensor loss = scale(adapt_loss(model, batch), 1.0 / cfg.grad_accum_steps);
      step_loss += loss.item() * cfg.grad_accum_steps;
      backward(loss);
    }
    step_loss /= cfg.grad_accum_steps;
    opt.step(lr);
    res.curve.push_back({step, cfg.stage, step_loss, 0.0, step_loss, lr});
    ++res.steps_run;
    if (cfg.target_task_loss > 0.0 && step_loss < cfg.target_task_loss) break;
  }
  res.final_state = {start + res.steps_run, rng_to_string(rng), opt.state()};
  return res;
}

TrainResult moe_tune(Transformer& model, const std::vector<InstructionExample>& data,
                     const TrainConfig& cfg, const ResumeState* resume, std::size_t stop_step) {
  cfg.validate(model.config().max_seq_len);
  if (cfg.stage != Stage::moe_tune) throw std::invalid_argument("moe_tune: config stage mismatch");
  if (!model.is_moe()) throw std::invalid_argument("moe_tune: model must be upcycled to MoE first");
  if (data.empty()) throw std::invalid_argument("moe_tune: empty dataset");

  // Frozen parameters take no gradients at all; activations still carry them.
  for (const auto& [name, t] : model.named_parameters()) {
    Tensor tt = t;
    tt.set_requires_grad(!model.is_frozen(name));
  }

  SpanLabeledBatch packed = pack_examples(data, cfg.cutoff_len);

  AdamW opt(model.named_parameters(), {0.9, 0.99, 1e-8, cfg.weight_decay}, &model.freeze_mask());
  std::mt19937_64 rng = make_rng(cfg, resume);
  std::size_t start = 0;
  if (resume) {
    opt.restore_state(resume->opt_state, resume->next_step);
    start = resume->next_step;
  }

  const LoopPlan plan = plan_loop(data.size(), cfg);
  TrainResult res;
  for (std::size_t step = start; step < plan.total_steps; ++step) {
    if (stop_step > 0 && step >= stop_step) break;
    const double lr = cosine_lr(cfg.learning_rate, step, plan.total_steps, cfg.warmup_steps);
    auto idx = step_examples(plan, cfg, data.size(), step);
    opt.zero_grad();
    double step_task = 0.0, step_balance = 0.0, step_combined = 0.0;
    for (std::size_t micro = 0; micro < cfg.grad_accum_steps; ++micro) {
      SpanLabeledBatch batch;
      std::vector<Tensor> logits;
      std::vector<ForwardResult> forwards;
      for (std::size_t i = 0; i < cfg.batch_size; ++i) {
        const std::size_t ei = idx[micro * cfg.batch_size + i];
        batch.tokens.push_back(packed.tokens[ei]);
        batch.span_tags.push_back(packed.span_tags[ei]);
        forwards.push_back(model.forward(packed.tokens[ei]));
        logits.push_back(forwards.back().logits);
      }
      std::vector<const ForwardResult*> frs;
      for (const auto& fr : forwards) frs.push_back(&fr);
      Tensor task = task_loss_from_logits(logits, batch);
      Tensor balance = balance_loss(collect_balance_stats(frs, model.config().total_experts));
      Tensor combined = combined_loss(task, balance, cfg.alpha);
      step_task += task.item();
      step_balance += balance.item();
      step_combined += combined.item();
      Tensor micro_loss = scale(combined, 1.0 / cfg.grad_accum_steps);
      backward(micro_loss);
    }
    step_task /= cfg.grad_accum_steps;
    step_balance /= cfg.grad_accum_steps;
    step_combined /= cfg.grad_accum_steps;
    opt.step(lr);
    res.curve.push_back({step, cfg.stage, step_task, step_balance, step_combined, lr});
    ++res.steps_run;
    if (cfg.target_task_loss > 0.0 && step_task < cfg.target_task_loss) break;
  }
  res.final_state = {start + res.steps_run, rng_to_string(rng), opt.state()};
  return res;
}

void write_loss_csv(const std::string& path, const std::vector<StepRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_loss_csv: cannot open " + path);
  out << "step,stage,task_loss,balance_loss,combined,lr\n";
  for (const auto& r : curve) {
    out << r.step << "," << stage_name(r.stage) << "," << r.task_loss << "," << r.balance_loss
        << "," << r.combined << "," << r.lr << "\n";
  }
}

}  // namespace moetune
