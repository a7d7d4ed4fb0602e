#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace moetune {

enum class Label { vulnerable, safe, unparseable };

std::string label_name(Label l);

/// First line matching "LABEL: <Vulnerable|Safe>" (case-insensitive) wins;
/// fallback is a keyword scan where the earlier of "vulnerable"/"safe" wins;
/// otherwise Unparseable.
Label parse_label(const std::string& text);

/// Modal label; even splits resolve to Vulnerable (security-conservative).
Label majority_vote(const std::vector<Label>& labels);

struct Prediction {
  std::string id;
  Label gold = Label::safe;
  std::vector<std::string> samples;
  Label label = Label::unparseable;             // majority of parsed samples
  std::map<std::string, std::size_t> tally;     // label name -> votes
};

Prediction resolve_prediction(const std::string& id, Label gold,
                              const std::vector<std::string>& samples);

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct DetectionMetrics {
  ConfusionCounts counts;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  bool zero_denominator = false;  // any of P/R/F1 forced to 0
  std::vector<std::string> misclassified_ids;
};

/// Vulnerable is the positive class; Unparseable predictions count as wrong.
DetectionMetrics detection_metrics(const std::vector<Prediction>& predictions);
DetectionMetrics detection_metrics(const std::vector<Label>& predicted,
                                   const std::vector<Label>& gold);

double f1_from_pr(double precision, double recall);

struct KappaResult {
  double kappa = 0.0;
  double p_observed = 0.0;
  double p_expected = 0.0;
  std::vector<std::vector<std::size_t>> contingency;
  std::size_t n = 0;
  std::size_t categories = 0;
  bool defined = true;      // false when P_e == 1
  std::string band;         // "strong" (>=0.75), "medium" (>=0.4), "weak"
};

/// Cohen's kappa over two aligned rating sequences with values in
/// [0, categories).
KappaResult cohen_kappa(const std::vector<std::size_t>& ratings_a,
                        const std::vector<std::size_t>& ratings_b, std::size_t categories);

struct RatingRecord {
  std::string item_id;
  std::string rater_id;
  std::string dimension;  // correctness | completeness | conciseness
  int score = 0;          // 1..4
};

struct LikertOutcome {
  std::string item_id;
  std::string dimension;
  int final_score = 0;  // floor of the mean
  bool divergent = false;
  std::string divergence_rule;  // "sign-split" | "gap>1" | ""
  bool needs_third_rater = false;
};

/// Aggregates per (item, dimension); requires >= 2 raters each. Divergence
/// fires on a negative{1,2}/positive{3,4} split or a gap of more than one
/// point; the rule that fired is recorded.
std::vector<LikertOutcome> likert_aggregate(const std::vector<RatingRecord>& records);

struct RatingDistribution {
  // dimension -> counts for scores 1..4, plus positive rate (3s+4s)/total.
  std::map<std::string, std::array<std::size_t, 4>> counts;
  std::map<std::string, double> positive_rate;
};

RatingDistribution rating_distribution(const std::vector<RatingRecord>& records);
double positive_rate_from_counts(const std::array<std::size_t, 4>& counts);

/// JSONL: {"id", "gold_label", "samples": [text, ...]} per line.
std::vector<Prediction> read_predictions_jsonl(const std::string& path);
void write_predictions_jsonl(const std::string& path, const std::vector<Prediction>& preds);

/// CSV: item_id,rater_id,dimension,score
std::vector<RatingRecord> read_ratings_csv(const std::string& path);
void write_ratings_csv(const std::string& path, const std::vector<RatingRecord>& records);

/// Full JSON report: detection metrics, confusion counts, per-pair kappa,
/// rating distributions, misclassified item ids.
void write_eval_report(const std::string& path, const DetectionMetrics& metrics,
                       const std::vector<std::pair<std::string, KappaResult>>& kappas,
                       const RatingDistribution& ratings);

}  // namespace moetune
