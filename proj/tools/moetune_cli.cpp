// Command-line front end tying the workbench together: data synthesis, the
// two training stages, inference with background voting, routing analytics,
// scoring, agreement statistics, and the annotation pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "moetune/analytics.hpp"
#include "moetune/annotation.hpp"
#include "moetune/checkpoint.hpp"
#include "moetune/dataset.hpp"
#include "moetune/evalharness.hpp"
#include "moetune/manifest.hpp"
#include "moetune/model.hpp"
#include "moetune/tokenizer.hpp"
#include "moetune/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moetune;

namespace {

// Option resolution order: built-in default < config file < explicit flag.
struct Options {
  std::map<std::string, std::string> values;
  std::map<std::string, std::string> resolved;  // everything actually read

  void load_config(const std::string& path) {
    for (const auto& [k, v] : read_config_file(path)) values[k] = v;
  }
  void set_flag(const std::string& key, const std::string& value) { values[key] = value; }

  std::string get(const std::string& key, const std::string& def) {
    auto it = values.find(key);
    const std::string v = it != values.end() ? it->second : def;
    resolved[key] = v;
    return v;
  }
  long long get_int(const std::string& key, long long def) {
    return std::stoll(get(key, std::to_string(def)));
  }
  double get_real(const std::string& key, double def) {
    return std::stod(get(key, std::to_string(def)));
  }
};

ModelConfig model_config_from(Options& opt) {
  ModelConfig cfg;
  cfg.n_layers = static_cast<std::size_t>(opt.get_int("n_layers", 4));
  cfg.d_model = static_cast<std::size_t>(opt.get_int("d_model", 64));
  cfg.n_heads = static_cast<std::size_t>(opt.get_int("n_heads", 4));
  cfg.d_ff = static_cast<std::size_t>(opt.get_int("d_ff", 128));
  cfg.vocab_size = static_cast<std::size_t>(opt.get_int("vocab_size", 260));
  cfg.max_seq_len = static_cast<std::size_t>(opt.get_int("max_seq_len", 256));
  cfg.ffn_style = opt.get("ffn_style", "gated-three-matrix") == "two-matrix"
                      ? FfnStyle::two_matrix
                      : FfnStyle::gated_three_matrix;
  return cfg;
}

TrainConfig train_config_from(Options& opt, Stage stage, unsigned long long seed) {
  TrainConfig cfg = opt.get("preset", "desk") == "full-scale" ? fullscale_defaults(stage) : TrainConfig{};
  cfg.stage = stage;
  cfg.learning_rate = opt.get_real("learning_rate", cfg.learning_rate);
  cfg.warmup_steps = static_cast<std::size_t>(opt.get_int("warmup_steps", cfg.warmup_steps));
  cfg.batch_size = static_cast<std::size_t>(opt.get_int("batch_size", cfg.batch_size));
  cfg.grad_accum_steps =
      static_cast<std::size_t>(opt.get_int("grad_accum_steps", cfg.grad_accum_steps));
  cfg.epochs = static_cast<std::size_t>(opt.get_int("epochs", cfg.epochs));
  cfg.max_steps = static_cast<std::size_t>(opt.get_int("max_steps", cfg.max_steps));
  cfg.cutoff_len = static_cast<std::size_t>(opt.get_int("cutoff_len", cfg.cutoff_len));
  cfg.weight_decay = opt.get_real("weight_decay", cfg.weight_decay);
  cfg.target_task_loss = opt.get_real("target_task_loss", cfg.target_task_loss);
  cfg.seed = seed;
  return cfg;
}

RunManifest start_manifest(const std::string& command, unsigned long long seed) {
  RunManifest m;
  m.command = command;
  m.seed = seed;
  m.started_at = iso8601_utc_now();
  return m;
}

void finish_manifest(RunManifest& m, Options& opt, const fs::path& out_dir) {
  m.resolved_config = opt.resolved;
  for (const auto& p : m.input_paths) m.input_hashes[p] = fnv1a64_file_hex(p);
  m.finished_at = iso8601_utc_now();
  write_manifest((out_dir / "manifest.json").string(), m);
}

std::vector<std::string> read_corpus_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus: " + path);
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) docs.push_back(line);
  }
  if (docs.empty()) throw std::runtime_error("corpus is empty: " + path);
  return docs;
}

std::vector<std::size_t> parse_layer_list(const std::string& spec, std::size_t n_layers) {
  if (spec.empty() || spec == "default") return default_layer_sample(n_layers);
  std::vector<std::size_t> out;
  std::istringstream is(spec);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoul(tok));
  return out;
}

int cmd_synth_data(Options& opt, unsigned long long seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("synth-data", seed);
  const auto per_type = static_cast<std::size_t>(opt.get_int("per_type", 16));
  const auto n_docs = static_cast<std::size_t>(opt.get_int("pretrain_docs", 64));
  const double vuln_frac = opt.get_real("vulnerable_fraction", 0.5);

  const fs::path data_path = fs::path(out_dir) / "dataset.jsonl";
  const fs::path corpus_path = fs::path(out_dir) / "corpus.txt";
  write_examples_jsonl(data_path.string(), synth_instruction_dataset(per_type, seed, vuln_frac));
  std::ofstream corpus(corpus_path);
  for (const auto& doc : synth_pretrain_corpus(n_docs, seed)) corpus << doc << "\n";
  corpus.close();

  man.output_paths = {data_path.string(), corpus_path.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "wrote " << data_path.string() << " and " << corpus_path.string() << "\n";
  return 0;
}

int cmd_pretrain(Options& opt, unsigned long long seed, const std::string& out_dir,
                 const std::string& dataset) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("pretrain", seed);
  man.input_paths = {dataset};

  ModelConfig mcfg = model_config_from(opt);
  std::mt19937_64 rng(seed);
  Transformer model = Transformer::make_dense(mcfg, rng);
  TrainConfig tcfg = train_config_from(opt, Stage::continual_pretrain, seed);
  TrainResult res = continual_pretrain(model, read_corpus_lines(dataset), tcfg);

  const fs::path ckpt = fs::path(out_dir) / "dense.ckpt";
  const fs::path curve = fs::path(out_dir) / "loss.csv";
  CheckpointMeta meta;
  meta.model_config = mcfg;
  meta.train_config = tcfg;
  meta.step = res.final_state.next_step;
  meta.stage = stage_name(Stage::continual_pretrain);
  meta.rng_state = res.final_state.rng_state;
  save_checkpoint(ckpt.string(), model, meta);
  write_loss_csv(curve.string(), res.curve);

  man.output_paths = {ckpt.string(), curve.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "pretrained " << res.steps_run << " steps; final loss "
            << (res.curve.empty() ? 0.0 : res.curve.back().task_loss) << "\n";
  return 0;
}

int cmd_upcycle(Options& opt, unsigned long long seed, const std::string& out_dir,
                const std::string& model_path, std::size_t experts, std::size_t top_k) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("upcycle", seed);
  man.input_paths = {model_path};

  CheckpointMeta meta;
  Transformer dense = load_checkpoint(model_path, &meta);
  if (dense.is_moe()) throw std::runtime_error("upcycle: input checkpoint is already MoE");
  std::mt19937_64 rng(seed);
  Transformer moe = upcycle_from_dense(dense, experts, top_k, rng);

  const fs::path ckpt = fs::path(out_dir) / "moe.ckpt";
  CheckpointMeta out_meta;
  out_meta.model_config = moe.config();
  out_meta.stage = "init";
  save_checkpoint(ckpt.string(), moe, out_meta);

  man.output_paths = {ckpt.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "upcycled to " << experts << " experts, top-" << top_k << "\n";
  return 0;
}

int cmd_moe_tune(Options& opt, unsigned long long seed, const std::string& out_dir,
                 const std::string& model_path, const std::string& dataset, double alpha) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("moe-tune", seed);
  man.input_paths = {model_path, dataset};

  Transformer model = load_checkpoint(model_path);
  TrainConfig tcfg = train_config_from(opt, Stage::moe_tune, seed);
  tcfg.alpha = alpha;
  TrainResult res = moe_tune(model, read_examples_jsonl(dataset), tcfg);

  const fs::path ckpt = fs::path(out_dir) / "tuned.ckpt";
  const fs::path curve = fs::path(out_dir) / "loss.csv";
  CheckpointMeta meta;
  meta.model_config = model.config();
  meta.train_config = tcfg;
  meta.step = res.final_state.next_step;
  meta.stage = stage_name(Stage::moe_tune);
  meta.rng_state = res.final_state.rng_state;
  meta.opt_state = res.final_state.opt_state;
  save_checkpoint(ckpt.string(), model, meta);
  write_loss_csv(curve.string(), res.curve);

  man.output_paths = {ckpt.string(), curve.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "tuned " << res.steps_run << " steps; final task loss "
            << (res.curve.empty() ? 0.0 : res.curve.back().task_loss) << "\n";
  return 0;
}

int cmd_infer(Options& opt, unsigned long long seed, const std::string& out_dir,
              const std::string& model_path, const std::string& dataset, std::size_t n_votes) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("infer", seed);
  man.input_paths = {model_path, dataset};

  Transformer model = load_checkpoint(model_path);
  auto examples = read_examples_jsonl(dataset);
  const auto max_new = static_cast<std::size_t>(opt.get_int("max_new_tokens", 96));
  const double temperature = opt.get_real("temperature", 0.0);
  const auto cutoff = static_cast<std::size_t>(
      opt.get_int("cutoff_len", static_cast<long long>(model.config().max_seq_len)));

  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto prompt = prompt_tokens(examples[i], cutoff);
    auto gens = generate(model, prompt, max_new, n_votes, tok::kEos, temperature, seed);
    std::vector<std::string> samples;
    for (const auto& g : gens) {
      samples.push_back(
          detokenize(std::vector<int>(g.tokens.begin() + static_cast<long>(prompt.size()),
                                      g.tokens.end())));
    }
    const Label gold = examples[i].label == "Vulnerable" ? Label::vulnerable : Label::safe;
    preds.push_back(resolve_prediction("item-" + std::to_string(i), gold, samples));
  }
  const fs::path out_path = fs::path(out_dir) / "predictions.jsonl";
  write_predictions_jsonl(out_path.string(), preds);

  man.output_paths = {out_path.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "inferred " << preds.size() << " items with " << n_votes << " votes each\n";
  return 0;
}

int cmd_analyze_routing(Options& opt, unsigned long long seed, const std::string& out_dir,
                        const std::string& model_path, const std::string& dataset,
                        const std::string& layers_flag) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("analyze-routing", seed);
  man.input_paths = {model_path, dataset};

  Transformer model = load_checkpoint(model_path);
  if (!model.is_moe()) throw std::runtime_error("analyze-routing: model has no MoE layers");
  auto examples = read_examples_jsonl(dataset);
  const auto cutoff = static_cast<std::size_t>(
      opt.get_int("cutoff_len", static_cast<long long>(model.config().max_seq_len)));

  std::map<std::string, std::vector<RoutingTrace>> by_class;
  for (const auto& ex : examples) {
    auto fr = model.forward(prompt_tokens(ex, cutoff));
    auto& dst = by_class[ex.vulnerability_type];
    dst.insert(dst.end(), fr.traces.begin(), fr.traces.end());
  }
  auto layers = parse_layer_list(layers_flag, model.config().n_layers);
  auto report = specialization_report(by_class, layers, model.config().total_experts);

  const fs::path csv = fs::path(out_dir) / "routing.csv";
  const fs::path js = fs::path(out_dir) / "routing.json";
  export_report_csv(report, csv.string());
  export_report_json(report, js.string());

  man.output_paths = {csv.string(), js.string()};
  finish_manifest(man, opt, out_dir);
  for (const auto& cls : report.classes) {
    std::cout << cls.class_name << ": dominant (" << cls.dominant_primary << ", "
              << cls.dominant_secondary << "), entropy first " << cls.entropy_first << " -> last "
              << cls.entropy_last << "\n";
  }
  return 0;
}

int cmd_eval(Options& opt, unsigned long long seed, const std::string& out_dir,
             const std::string& dataset) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("eval", seed);
  man.input_paths = {dataset};

  auto preds = read_predictions_jsonl(dataset);
  DetectionMetrics m = detection_metrics(preds);
  const fs::path report = fs::path(out_dir) / "eval.json";
  write_eval_report(report.string(), m, {}, {});

  man.output_paths = {report.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "accuracy " << m.accuracy << " precision " << m.precision << " recall " << m.recall
            << " f1 " << m.f1 << "\n";
  return 0;
}

int cmd_kappa(Options& opt, unsigned long long seed, const std::string& out_dir,
              const std::string& dataset) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("kappa", seed);
  man.input_paths = {dataset};

  auto records = read_ratings_csv(dataset);
  // Group scores by (dimension, item) and compute kappa per rater pair.
  std::map<std::string, std::map<std::string, std::map<std::string, int>>> by_dim;
  std::set<std::string> raters;
  for (const auto& r : records) {
    by_dim[r.dimension][r.item_id][r.rater_id] = r.score;
    raters.insert(r.rater_id);
  }
  json out = json::object();
  std::vector<std::string> rater_list(raters.begin(), raters.end());
  for (const auto& [dim, items] : by_dim) {
    json dim_out = json::object();
    for (std::size_t a = 0; a < rater_list.size(); ++a) {
      for (std::size_t b = a + 1; b < rater_list.size(); ++b) {
        std::vector<std::size_t> ra, rb;
        for (const auto& [item, scores] : items) {
          auto ia = scores.find(rater_list[a]);
          auto ib = scores.find(rater_list[b]);
          if (ia == scores.end() || ib == scores.end()) continue;
          ra.push_back(static_cast<std::size_t>(ia->second - 1));
          rb.push_back(static_cast<std::size_t>(ib->second - 1));
        }
        if (ra.empty()) continue;
        KappaResult k = cohen_kappa(ra, rb, 4);
        dim_out[rater_list[a] + "/" + rater_list[b]] = {{"kappa", k.kappa},
                                                        {"p_observed", k.p_observed},
                                                        {"p_expected", k.p_expected},
                                                        {"n", k.n},
                                                        {"defined", k.defined},
                                                        {"band", k.band}};
      }
    }
    out[dim] = dim_out;
  }
  const fs::path report = fs::path(out_dir) / "kappa.json";
  std::ofstream o(report);
  o << out.dump(2) << "\n";
  o.close();

  man.output_paths = {report.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_likert(Options& opt, unsigned long long seed, const std::string& out_dir,
               const std::string& dataset) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("likert", seed);
  man.input_paths = {dataset};

  auto records = read_ratings_csv(dataset);
  auto outcomes = likert_aggregate(records);
  auto dist = rating_distribution(records);

  json items = json::array();
  for (const auto& o : outcomes) {
    items.push_back({{"item_id", o.item_id},
                     {"dimension", o.dimension},
                     {"final_score", o.final_score},
                     {"divergent", o.divergent},
                     {"divergence_rule", o.divergence_rule},
                     {"needs_third_rater", o.needs_third_rater}});
  }
  json dist_out = json::object();
  for (const auto& [dim, counts] : dist.counts) {
    dist_out[dim] = {{"counts", counts}, {"positive_rate", dist.positive_rate.at(dim)}};
  }
  const fs::path report = fs::path(out_dir) / "likert.json";
  std::ofstream o(report);
  o << json{{"items", items}, {"distribution", dist_out}}.dump(2) << "\n";
  o.close();

  man.output_paths = {report.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "aggregated " << outcomes.size() << " item-dimension scores\n";
  return 0;
}

int cmd_annotate(Options& opt, unsigned long long seed, const std::string& out_dir,
                 const std::string& dataset) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("annotate", seed);
  man.input_paths = {dataset};

  auto items = read_annotation_items_jsonl(dataset);

  // Scripted mock clients; the judge threshold behavior is configurable so
  // operators can exercise the judged-out branch.
  const int judge_score = static_cast<int>(opt.get_int("mock_judge_score", 8));
  ScriptedGenerator gen_a("generator-A", [](const std::string& prompt) {
    return "The contract is vulnerable: " + prompt.substr(0, 48);
  });
  ScriptedGenerator gen_b("generator-B", [](const std::string& prompt) {
    return "Vulnerability analysis: " + prompt.substr(0, 40);
  });
  ScriptedJudge judge([judge_score](const ExplanationCandidate&) {
    QualityScore s;
    s.correctness = s.completeness = s.conciseness = judge_score;
    s.rationale = "scripted";
    return s;
  });
  ScriptedReviewer rev_a("reviewer-A", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedReviewer rev_b("reviewer-B", [](const ExplanationCandidate&) { return Verdict::accept; });
  ScriptedRefiner refiner(
      [](const ExplanationCandidate& c, const std::string&) { return c.text + " (refined)"; });

  PipelineClients clients;
  clients.generators = {&gen_a, &gen_b};
  clients.judge = &judge;
  clients.reviewer_a = &rev_a;
  clients.reviewer_b = &rev_b;
  clients.refiner = &refiner;

  const fs::path out_jsonl = fs::path(out_dir) / "annotated.jsonl";
  const fs::path audit_dir = fs::path(out_dir) / "audit";
  PipelineReport rep = run_pipeline(items, clients, out_jsonl.string(), audit_dir.string());

  man.output_paths = {out_jsonl.string()};
  finish_manifest(man, opt, out_dir);
  std::cout << "items " << rep.items << ", candidates " << rep.candidates_generated
            << ", judged-out " << rep.judged_out << ", verified " << rep.verified << ", pending "
            << rep.pending << "\n";
  return 0;
}

int cmd_param_count(Options& opt, unsigned long long seed, const std::string& out_dir,
                    std::size_t experts, std::size_t top_k) {
  fs::create_directories(out_dir);
  RunManifest man = start_manifest("param-count", seed);

  ModelConfig cfg;
  if (opt.get("preset", "desk") == "llama3b") {
    cfg.n_layers = 28;
    cfg.d_model = 3072;
    cfg.n_heads = 24;
    cfg.n_kv_heads = 8;
    cfg.d_ff = 8192;
    cfg.vocab_size = 128256;
    cfg.max_seq_len = 2048;
    cfg.tie_embeddings = true;
    cfg.ffn_style = FfnStyle::gated_three_matrix;
  } else {
    cfg = model_config_from(opt);
  }
  cfg.total_experts = experts;
  cfg.active_experts = top_k;
  ParamCount pc = count_parameters(cfg);
  std::cout << "total " << pc.total << " activated " << pc.activated << "\n";

  finish_manifest(man, opt, out_dir);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale MoE tuning workbench"};
  app.require_subcommand(1);

  std::string config_path, out_dir = ".", model_path, dataset, layers_flag = "default";
  unsigned long long seed = 0;
  double alpha = 0.01;
  std::size_t experts = 8, top_k = 2, n_votes = 1;

  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "global RNG seed");
  app.add_option("--out-dir", out_dir, "output directory");
  app.add_option("--model", model_path, "model checkpoint path");
  app.add_option("--dataset", dataset, "input dataset path");
  app.add_option("--alpha", alpha, "balance loss coefficient");
  app.add_option("--experts", experts, "total experts E");
  app.add_option("--top-k", top_k, "active experts k");
  app.add_option("--n-votes", n_votes, "background vote count");
  app.add_option("--layers", layers_flag, "comma-separated layer list or 'default'");

  auto* synth = app.add_subcommand("synth-data", "generate synthetic corpora and datasets");
  auto* pretrain = app.add_subcommand("pretrain", "continual pre-training of the dense model");
  auto* upcycle = app.add_subcommand("upcycle", "expand a dense checkpoint into an MoE model");
  auto* tune = app.add_subcommand("moe-tune", "tune experts and routers with the combined loss");
  auto* infer = app.add_subcommand("infer", "generate predictions with background voting");
  auto* analyze = app.add_subcommand("analyze-routing", "expert specialization report");
  auto* eval = app.add_subcommand("eval", "detection metrics from predictions");
  auto* kappa = app.add_subcommand("kappa", "inter-rater agreement from ratings CSV");
  auto* likert = app.add_subcommand("likert", "Likert aggregation and distributions");
  auto* annotate = app.add_subcommand("annotate", "explanation annotation pipeline (mock clients)");
  auto* param_count = app.add_subcommand("param-count", "parameter accounting for a preset");

  // Let the shared flags appear after the subcommand name as well.
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    Options opt;
    if (!config_path.empty()) opt.load_config(config_path);
    // Flags override the file.
    for (const auto* o : app.get_options()) {
      if (o->count() == 0) continue;
      const std::string name = o->get_name();
      if (name == "--seed") opt.set_flag("seed", std::to_string(seed));
      if (name == "--alpha") opt.set_flag("alpha", std::to_string(alpha));
    }
    if (opt.values.count("seed") && app.count("--seed") == 0) {
      seed = std::stoull(opt.values["seed"]);
    }
    if (opt.values.count("alpha") && app.count("--alpha") == 0) {
      alpha = std::stod(opt.values["alpha"]);
    }

    auto need = [&](const std::string& value, const std::string& flag) {
      if (value.empty()) throw std::runtime_error("missing required flag " + flag);
      return value;
    };

    if (synth->parsed()) return cmd_synth_data(opt, seed, out_dir);
    if (pretrain->parsed())
      return cmd_pretrain(opt, seed, out_dir, need(dataset, "--dataset"));
    if (upcycle->parsed())
      return cmd_upcycle(opt, seed, out_dir, need(model_path, "--model"), experts, top_k);
    if (tune->parsed())
      return cmd_moe_tune(opt, seed, out_dir, need(model_path, "--model"),
                          need(dataset, "--dataset"), alpha);
    if (infer->parsed())
      return cmd_infer(opt, seed, out_dir, need(model_path, "--model"),
                       need(dataset, "--dataset"), n_votes);
    if (analyze->parsed())
      return cmd_analyze_routing(opt, seed, out_dir, need(model_path, "--model"),
                                 need(dataset, "--dataset"), layers_flag);
    if (eval->parsed()) return cmd_eval(opt, seed, out_dir, need(dataset, "--dataset"));
    if (kappa->parsed()) return cmd_kappa(opt, seed, out_dir, need(dataset, "--dataset"));
    if (likert->parsed()) return cmd_likert(opt, seed, out_dir, need(dataset, "--dataset"));
    if (annotate->parsed()) return cmd_annotate(opt, seed, out_dir, need(dataset, "--dataset"));
    if (param_count->parsed()) return cmd_param_count(opt, seed, out_dir, experts, top_k);
    std::cerr << "no subcommand selected\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
