#include "moetune/annotation.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "moetune/analytics.hpp"

namespace moetune {

namespace fs = std::filesystem;
using nlohmann::json;

double QualityScore::overall() const {
  if (overall_override) return *overall_override;
  return (correctness + completeness + conciseness) / 3.0;
}

void QualityScore::validate() const {
  auto in_range = [](int v) { return v >= 1 && v <= 10; };
  if (!in_range(correctness) || !in_range(completeness) || !in_range(conciseness)) {
    throw std::invalid_argument("QualityScore: dimension scores must be in 1..10");
  }
  if (overall_override && (*overall_override < 1.0 || *overall_override > 10.0)) {
    throw std::invalid_argument("QualityScore: overall override out of 1..10");
  }
}

std::string verdict_name(Verdict v) {
  switch (v) {
    case Verdict::accept: return "accept";
    case Verdict::needs_refinement: return "needs-refinement";
    default: return "reject";
  }
}

std::string label_guided_prompt(const std::string& vulnerability_type, const std::string& code) {
  std::string directive;
  if (vulnerability_type == "reentrancy") {
    directive =
        "Pay close attention to the ordering of external calls and state writes: explain how a "
        "callback could re-enter before balances are updated.";
  } else if (vulnerability_type == "timestamp") {
    directive =
        "Focus on uses of the block timestamp in control flow or payouts and explain why miners "
        "can influence the outcome.";
  } else if (vulnerability_type == "integer-overflow") {
    directive =
        "Focus on unchecked arithmetic and explain how an overflow or underflow can corrupt "
        "balances or bypass checks.";
  } else if (vulnerability_type == "delegatecall") {
    directive =
        "Focus on delegatecall targets and storage layout and explain how a caller-controlled "
        "target can hijack contract state.";
  } else {
    directive = "Explain the security weakness this contract exhibits and its impact.";
  }
  return "You are auditing a smart contract for a " + vulnerability_type +
         " vulnerability.\n" + directive + "\n\nCode:\n" + code +
         "\n\nWrite a precise explanation of the vulnerability.";
}

std::string FilesystemReplayGenerator::generate(const std::string& prompt) {
  // Replay files are keyed by a line "ITEM: <id>" that callers embed in the
  // prompt; fall back to hashing the prompt when absent.
  std::string key;
  std::istringstream is(prompt);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("ITEM: ", 0) == 0) {
      key = line.substr(6);
      break;
    }
  }
  if (key.empty()) key = std::to_string(std::hash<std::string>{}(prompt));
  const fs::path path = fs::path(dir_) / (key + "." + id_ + ".txt");
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("replay generator " + id_ + ": no canned response at " +
                             path.string());
  }
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

GenerationResult generate_explanations(const AnnotationItem& item,
                                       const std::vector<GeneratorClient*>& generators) {
  if (generators.empty()) {
    throw std::invalid_argument("generate_explanations: no generators configured");
  }
  GenerationResult res;
  const std::string prompt =
      "ITEM: " + item.id + "\n" + label_guided_prompt(item.vulnerability_type, item.code);
  for (GeneratorClient* g : generators) {
    try {
      ExplanationCandidate c;
      c.source_id = g->id();
      c.item_id = item.id;
      c.vulnerability_type = item.vulnerability_type;
      c.text = g->generate(prompt);
      if (c.text.empty()) throw std::runtime_error("empty explanation");
      res.candidates.push_back(std::move(c));
    } catch (const std::exception& e) {
      res.failures.push_back({g->id(), e.what()});
    }
  }
  return res;
}

std::optional<JudgedCandidate> evaluate_explanations(
    const std::vector<ExplanationCandidate>& candidates, JudgeClient& judge,
    std::vector<JudgedCandidate>* all_scores) {
  std::optional<JudgedCandidate> best;
  for (const auto& c : candidates) {
    QualityScore s = judge.score(c);
    s.validate();
    if (all_scores) all_scores->push_back({c, s});
    // Strict > keeps the earlier candidate on ties (generator-A wins).
    if (!best || s.overall() > best->score.overall()) best = JudgedCandidate{c, s};
  }
  if (!best || best->score.overall() < 6.0) return std::nullopt;
  return best;
}

ReviewOutcome expert_verification(const ExplanationCandidate& candidate, ReviewerClient& reviewer_a,
                                  ReviewerClient& reviewer_b, RefinerClient& refiner,
                                  const ConsensusFn& consensus) {
  ReviewOutcome out;
  out.reviewer_a = reviewer_a.review(candidate);
  out.reviewer_b = reviewer_b.review(candidate);

  if (out.reviewer_a != out.reviewer_b) {
    std::optional<std::string> record;
    if (consensus) record = consensus(candidate, out.reviewer_a, out.reviewer_b);
    if (!record) {
      out.pending = true;
      return out;
    }
    out.consensus_record = record;
  }

  const bool any_reject =
      out.reviewer_a == Verdict::reject || out.reviewer_b == Verdict::reject;
  const bool any_refine =
      out.reviewer_a == Verdict::needs_refinement || out.reviewer_b == Verdict::needs_refinement;
  if (any_reject && !out.consensus_record) {
    out.pending = true;  // unanimous reject: nothing to emit
    return out;
  }
  if (any_refine || (any_reject && out.consensus_record)) {
    std::string fb = out.reviewer_a == Verdict::needs_refinement ? reviewer_a.feedback(candidate)
                                                                 : reviewer_b.feedback(candidate);
    if (out.consensus_record && fb.empty()) fb = *out.consensus_record;
    out.refined_text = refiner.refine(candidate, fb);
    out.final_text = *out.refined_text;
  } else {
    out.final_text = candidate.text;
  }
  return out;
}

namespace {

json audit_skeleton(const AnnotationItem& item) {
  return json{{"schema_version", kAuditSchemaVersion},
              {"item_id", item.id},
              {"vulnerability_type", item.vulnerability_type},
              {"stage", "generated"},
              {"generators", json::array()},
              {"judge", json::array()},
              {"reviews", json::array()}};
}

bool terminal_stage(const std::string& stage) {
  return stage == "verified" || stage == "judged-out" || stage == "generation-failed";
}

}  // namespace

PipelineReport run_pipeline(const std::vector<AnnotationItem>& items,
                            const PipelineClients& clients, const std::string& out_jsonl,
                            const std::string& audit_dir) {
  if (clients.generators.empty() || !clients.judge || !clients.reviewer_a || !clients.reviewer_b ||
      !clients.refiner) {
    throw std::invalid_argument("run_pipeline: all clients must be configured");
  }
  fs::create_directories(audit_dir);

  PipelineReport rep;
  rep.items = items.size();
  std::vector<InstructionExample> accepted;

  for (const auto& item : items) {
    const fs::path audit_path = fs::path(audit_dir) / (item.id + ".audit.json");

    // Resume: an existing terminal audit record settles the item.
    if (fs::exists(audit_path)) {
      std::ifstream in(audit_path);
      json prior = json::parse(in);
      const std::string stage = prior.value("stage", "");
      if (terminal_stage(stage)) {
        ++rep.resumed_from_audit;
        rep.candidates_generated += prior.at("generators").size();
        if (stage == "judged-out") ++rep.judged_out;
        if (stage == "generation-failed") ++rep.generation_failures;
        if (stage == "verified") {
          ++rep.best_selected;
          ++rep.verified;
          InstructionExample ex;
          ex.instruction = "Audit the following smart contract and report whether it is "
                           "Vulnerable or Safe, then explain.";
          ex.code = item.code;
          ex.label = "Vulnerable";
          ex.vulnerability_type = item.vulnerability_type;
          ex.explanation = prior.at("final_explanation");
          accepted.push_back(std::move(ex));
        }
        continue;
      }
    }

    json audit = audit_skeleton(item);

    GenerationResult gen = generate_explanations(item, clients.generators);
    rep.candidates_generated += gen.candidates.size();
    rep.generation_failures += gen.failures.size();
    for (const auto& c : gen.candidates) {
      audit["generators"].push_back({{"source", c.source_id}, {"text", c.text}, {"ok", true}});
    }
    for (const auto& f : gen.failures) {
      audit["generators"].push_back({{"source", f.source_id}, {"error", f.error}, {"ok", false}});
    }

    auto write_audit = [&]() {
      std::ofstream out(audit_path);
      if (!out) throw std::runtime_error("run_pipeline: cannot write " + audit_path.string());
      out << audit.dump(2) << "\n";
    };

    if (gen.candidates.empty()) {
      audit["stage"] = "generation-failed";
      write_audit();
      continue;
    }

    std::vector<JudgedCandidate> scored;
    auto best = evaluate_explanations(gen.candidates, *clients.judge, &scored);
    for (const auto& jc : scored) {
      audit["judge"].push_back({{"source", jc.candidate.source_id},
                                {"correctness", jc.score.correctness},
                                {"completeness", jc.score.completeness},
                                {"conciseness", jc.score.conciseness},
                                {"overall", jc.score.overall()},
                                {"rationale", jc.score.rationale}});
    }
    if (!best) {
      ++rep.judged_out;
      audit["stage"] = "judged-out";
      write_audit();
      continue;
    }
    ++rep.best_selected;
    audit["best_source"] = best->candidate.source_id;

    ReviewOutcome review = expert_verification(best->candidate, *clients.reviewer_a,
                                               *clients.reviewer_b, *clients.refiner,
                                               clients.consensus);
    audit["reviews"].push_back(
        {{"reviewer", clients.reviewer_a->id()}, {"verdict", verdict_name(review.reviewer_a)}});
    audit["reviews"].push_back(
        {{"reviewer", clients.reviewer_b->id()}, {"verdict", verdict_name(review.reviewer_b)}});
    if (review.consensus_record) audit["consensus"] = *review.consensus_record;
    if (review.refined_text) audit["refined_text"] = *review.refined_text;

    if (review.pending) {
      ++rep.pending;
      audit["stage"] = "pending";
      write_audit();
      continue;
    }

    ++rep.verified;
    audit["stage"] = "verified";
    audit["final_explanation"] = review.final_text;
    write_audit();

    InstructionExample ex;
    ex.instruction = "Audit the following smart contract and report whether it is Vulnerable or "
                     "Safe, then explain.";
    ex.code = item.code;
    ex.label = "Vulnerable";
    ex.vulnerability_type = item.vulnerability_type;
    ex.explanation = review.final_text;
    accepted.push_back(std::move(ex));
  }

  write_examples_jsonl(out_jsonl, accepted);
  return rep;
}

std::vector<AnnotationItem> read_annotation_items_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_annotation_items_jsonl: cannot open " + path);
  std::vector<AnnotationItem> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    out.push_back({j.at("id"), j.at("code"), j.at("vulnerability_type")});
  }
  return out;
}

void write_annotation_items_jsonl(const std::string& path,
                                  const std::vector<AnnotationItem>& items) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_annotation_items_jsonl: cannot open " + path);
  for (const auto& it : items) {
    out << json{{"id", it.id}, {"code", it.code}, {"vulnerability_type", it.vulnerability_type}}
               .dump()
        << "\n";
  }
}

void validate_audit_trail(const std::string& audit_path, const std::string& schema_path) {
  validate_json_file(audit_path, schema_path);
}

}  // namespace moetune
