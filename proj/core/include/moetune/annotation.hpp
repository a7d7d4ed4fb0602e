#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "moetune/dataset.hpp"

namespace moetune {

constexpr int kAuditSchemaVersion = 1;

struct AnnotationItem {
  std::string id;
  std::string code;
  std::string vulnerability_type;
};

struct ExplanationCandidate {
  std::string source_id;  // "generator-A" | "generator-B"
  std::string item_id;
  std::string vulnerability_type;
  std::string text;
};

struct QualityScore {
  int correctness = 0;   // 1..10
  int completeness = 0;  // 1..10
  int conciseness = 0;   // 1..10
  std::optional<double> overall_override;
  std::string rationale;

  double overall() const;
  void validate() const;
};

enum class Verdict { accept, needs_refinement, reject };

std::string verdict_name(Verdict v);

struct ReviewOutcome {
  Verdict reviewer_a = Verdict::accept;
  Verdict reviewer_b = Verdict::accept;
  std::optional<std::string> refined_text;
  std::optional<std::string> consensus_record;  // required when verdicts disagree
  std::string final_text;
  bool pending = false;  // disagreement with no consensus: item held back
};

/// Prompt template keyed by vulnerability type; each directs attention to the
/// class's telltale pattern.
std::string label_guided_prompt(const std::string& vulnerability_type, const std::string& code);

class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  virtual std::string id() const = 0;
  /// Throws on failure; generate_explanations records the failure and
  /// continues with the remaining generators.
  virtual std::string generate(const std::string& prompt) = 0;
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  virtual QualityScore score(const ExplanationCandidate& candidate) = 0;
};

class ReviewerClient {
 public:
  virtual ~ReviewerClient() = default;
  virtual std::string id() const = 0;
  virtual Verdict review(const ExplanationCandidate& candidate) = 0;
  /// Refinement feedback accompanying a needs-refinement verdict.
  virtual std::string feedback(const ExplanationCandidate& candidate) { return ""; }
};

class RefinerClient {
 public:
  virtual ~RefinerClient() = default;
  virtual std::string refine(const ExplanationCandidate& candidate,
                             const std::string& feedback) = 0;
};

/// Scripted mocks driven by plain callbacks; deterministic by construction.
class ScriptedGenerator : public GeneratorClient {
 public:
  ScriptedGenerator(std::string id, std::function<std::string(const std::string&)> fn)
      : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string id() const override { return id_; }
  std::string generate(const std::string& prompt) override { return fn_(prompt); }

 private:
  std::string id_;
  std::function<std::string(const std::string&)> fn_;
};

class ScriptedJudge : public JudgeClient {
 public:
  explicit ScriptedJudge(std::function<QualityScore(const ExplanationCandidate&)> fn)
      : fn_(std::move(fn)) {}
  QualityScore score(const ExplanationCandidate& c) override { return fn_(c); }

 private:
  std::function<QualityScore(const ExplanationCandidate&)> fn_;
};

class ScriptedReviewer : public ReviewerClient {
 public:
  ScriptedReviewer(std::string id, std::function<Verdict(const ExplanationCandidate&)> fn,
                   std::string feedback = "")
      : id_(std::move(id)), fn_(std::move(fn)), feedback_(std::move(feedback)) {}
  std::string id() const override { return id_; }
  Verdict review(const ExplanationCandidate& c) override { return fn_(c); }
  std::string feedback(const ExplanationCandidate&) override { return feedback_; }

 private:
  std::string id_;
  std::function<Verdict(const ExplanationCandidate&)> fn_;
  std::string feedback_;
};

class ScriptedRefiner : public RefinerClient {
 public:
  explicit ScriptedRefiner(
      std::function<std::string(const ExplanationCandidate&, const std::string&)> fn)
      : fn_(std::move(fn)) {}
  std::string refine(const ExplanationCandidate& c, const std::string& fb) override {
    return fn_(c, fb);
  }

 private:
  std::function<std::string(const ExplanationCandidate&, const std::string&)> fn_;
};

/// Generator that replays canned responses from <dir>/<item_id>.<gen_id>.txt.
class FilesystemReplayGenerator : public GeneratorClient {
 public:
  FilesystemReplayGenerator(std::string id, std::string dir)
      : id_(std::move(id)), dir_(std::move(dir)) {}
  std::string id() const override { return id_; }
  std::string generate(const std::string& prompt) override;

 private:
  std::string id_;
  std::string dir_;
};

struct GenerationFailure {
  std::string source_id;
  std::string error;
};

struct GenerationResult {
  std::vector<ExplanationCandidate> candidates;
  std::vector<GenerationFailure> failures;
};

GenerationResult generate_explanations(const AnnotationItem& item,
                                       const std::vector<GeneratorClient*>& generators);

struct JudgedCandidate {
  ExplanationCandidate candidate;
  QualityScore score;
};

/// Returns the best-scoring candidate when its overall score >= 6; ties go to
/// the earlier candidate (generator-A first). nullopt means judged out.
std::optional<JudgedCandidate> evaluate_explanations(
    const std::vector<ExplanationCandidate>& candidates, JudgeClient& judge,
    std::vector<JudgedCandidate>* all_scores = nullptr);

/// Consensus resolver for disagreeing reviewers; empty result keeps the item
/// in pending state.
using ConsensusFn = std::function<std::optional<std::string>(
    const ExplanationCandidate&, Verdict reviewer_a, Verdict reviewer_b)>;

ReviewOutcome expert_verification(const ExplanationCandidate& candidate, ReviewerClient& reviewer_a,
                                  ReviewerClient& reviewer_b, RefinerClient& refiner,
                                  const ConsensusFn& consensus = nullptr);

struct PipelineClients {
  std::vector<GeneratorClient*> generators;
  JudgeClient* judge = nullptr;
  ReviewerClient* reviewer_a = nullptr;
  ReviewerClient* reviewer_b = nullptr;
  RefinerClient* refiner = nullptr;
  ConsensusFn consensus;
};

struct PipelineReport {
  std::size_t items = 0;
  std::size_t candidates_generated = 0;
  std::size_t generation_failures = 0;
  std::size_t judged_out = 0;
  std::size_t best_selected = 0;
  std::size_t verified = 0;
  std::size_t pending = 0;
  std::size_t resumed_from_audit = 0;
};

/// Runs generate -> judge -> verify per item, writing accepted items as
/// InstructionExample JSONL plus one audit-trail JSON per item under
/// <audit_dir>. Items whose audit file already records a terminal state are
/// skipped (idempotent resume keyed by item id).
PipelineReport run_pipeline(const std::vector<AnnotationItem>& items,
                            const PipelineClients& clients, const std::string& out_jsonl,
                            const std::string& audit_dir);

std::vector<AnnotationItem> read_annotation_items_jsonl(const std::string& path);
void write_annotation_items_jsonl(const std::string& path,
                                  const std::vector<AnnotationItem>& items);

/// Structural check of one audit-trail file against the shipped schema.
void validate_audit_trail(const std::string& audit_path, const std::string& schema_path);

}  // namespace moetune
