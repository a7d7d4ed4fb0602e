#include "moetune/evalharness.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace moetune {

using nlohmann::json;

std::string label_name(Label l) {
  switch (l) {
    case Label::vulnerable: return "Vulnerable";
    case Label::safe: return "Safe";
    default: return "Unparseable";
  }
}

namespace {

std::string lower(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Label label_from_name(const std::string& name) {
  const std::string n = lower(name);
  if (n == "vulnerable") return Label::vulnerable;
  if (n == "safe") return Label::safe;
  return Label::unparseable;
}

}  // namespace

Label parse_label(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::string low = lower(trim(line));
    if (low.rfind("label:", 0) == 0) {
      const std::string value = trim(low.substr(6));
      if (value.rfind("vulnerable", 0) == 0) return Label::vulnerable;
      if (value.rfind("safe", 0) == 0) return Label::safe;
    }
  }
  const std::string low = lower(text);
  const auto pv = low.find("vulnerable");
  const auto ps = low.find("safe");
  if (pv == std::string::npos && ps == std::string::npos) return Label::unparseable;
  if (ps == std::string::npos) return Label::vulnerable;
  if (pv == std::string::npos) return Label::safe;
  return pv < ps ? Label::vulnerable : Label::safe;
}

Label majority_vote(const std::vector<Label>& labels) {
  if (labels.empty()) throw std::invalid_argument("majority_vote: empty vote list");
  std::map<Label, std::size_t> tally;
  for (Label l : labels) ++tally[l];
  std::size_t best = 0;
  for (const auto& [l, n] : tally) best = std::max(best, n);
  // Ties resolve toward Vulnerable.
  if (tally[Label::vulnerable] == best) return Label::vulnerable;
  if (tally[Label::safe] == best) return Label::safe;
  return Label::unparseable;
}

Prediction resolve_prediction(const std::string& id, Label gold,
                              const std::vector<std::string>& samples) {
  Prediction p;
  p.id = id;
  p.gold = gold;
  p.samples = samples;
  std::vector<Label> votes;
  for (const auto& s : samples) {
    Label l = parse_label(s);
    votes.push_back(l);
    ++p.tally[label_name(l)];
  }
  p.label = majority_vote(votes);
  return p;
}

double f1_from_pr(double precision, double recall) {
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

DetectionMetrics detection_metrics(const std::vector<Prediction>& predictions) {
  DetectionMetrics m;
  std::vector<Label> pred, gold;
  for (const auto& p : predictions) {
    pred.push_back(p.label);
    gold.push_back(p.gold);
  }
  m = detection_metrics(pred, gold);
  m.misclassified_ids.clear();
  for (const auto& p : predictions) {
    if (p.label != p.gold) m.misclassified_ids.push_back(p.id);
  }
  return m;
}

DetectionMetrics detection_metrics(const std::vector<Label>& predicted,
                                   const std::vector<Label>& gold) {
  if (predicted.size() != gold.size()) {
    throw std::invalid_argument("detection_metrics: prediction/gold length mismatch");
  }
  if (predicted.empty()) throw std::invalid_argument("detection_metrics: empty input");
  DetectionMetrics m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool gold_pos = gold[i] == Label::vulnerable;
    const bool pred_pos = predicted[i] == Label::vulnerable;
    // Unparseable never matches either gold label, so it lands in FP or FN.
    if (gold_pos && pred_pos) ++m.counts.tp;
    else if (gold_pos) ++m.counts.fn;
    else if (pred_pos) ++m.counts.fp;
    else if (predicted[i] == gold[i]) ++m.counts.tn;
    else ++m.counts.fn;  // gold Safe, predicted Unparseable: wrong, not a TN
    if (predicted[i] != gold[i]) m.misclassified_ids.push_back(std::to_string(i));
  }
  const double n = static_cast<double>(predicted.size());
  m.accuracy = static_cast<double>(m.counts.tp + m.counts.tn) / n;
  const std::size_t pden = m.counts.tp + m.counts.fp;
  const std::size_t rden = m.counts.tp + m.counts.fn;
  if (pden == 0 || rden == 0) m.zero_denominator = true;
  m.precision = pden ? static_cast<double>(m.counts.tp) / static_cast<double>(pden) : 0.0;
  m.recall = rden ? static_cast<double>(m.counts.tp) / static_cast<double>(rden) : 0.0;
  m.f1 = f1_from_pr(m.precision, m.recall);
  if (m.f1 == 0.0 && (m.precision + m.recall) == 0.0) m.zero_denominator = true;
  return m;
}

KappaResult cohen_kappa(const std::vector<std::size_t>& ratings_a,
                        const std::vector<std::size_t>& ratings_b, std::size_t categories) {
  if (ratings_a.size() != ratings_b.size()) {
    throw std::invalid_argument("cohen_kappa: rater sequences must align");
  }
  if (ratings_a.empty()) throw std::invalid_argument("cohen_kappa: empty ratings");
  if (categories == 0) throw std::invalid_argument("cohen_kappa: zero categories");

  KappaResult r;
  r.n = ratings_a.size();
  r.categories = categories;
  r.contingency.assign(categories, std::vector<std::size_t>(categories, 0));
  for (std::size_t i = 0; i < r.n; ++i) {
    if (ratings_a[i] >= categories || ratings_b[i] >= categories) {
      throw std::invalid_argument("cohen_kappa: rating out of category range");
    }
    ++r.contingency[ratings_a[i]][ratings_b[i]];
  }
  std::size_t agree = 0;
  std::vector<double> pa(categories, 0.0), pb(categories, 0.0);
  for (std::size_t i = 0; i < categories; ++i) {
    agree += r.contingency[i][i];
    for (std::size_t j = 0; j < categories; ++j) {
      pa[i] += static_cast<double>(r.contingency[i][j]);
      pb[j] += static_cast<double>(r.contingency[i][j]);
    }
  }
  r.p_observed = static_cast<double>(agree) / static_cast<double>(r.n);
  r.p_expected = 0.0;
  for (std::size_t i = 0; i < categories; ++i) {
    r.p_expected += (pa[i] / static_cast<double>(r.n)) * (pb[i] / static_cast<double>(r.n));
  }
  if (r.p_expected >= 1.0) {
    r.defined = false;
    r.kappa = 0.0;
    r.band = "undefined";
    return r;
  }
  r.kappa = (r.p_observed - r.p_expected) / (1.0 - r.p_expected);
  // Tiny slack keeps band thresholds stable against round-off (0.4 computed
  // as 0.3999...97 must still read "medium").
  const double k = r.kappa + 1e-12;
  r.band = k >= 0.75 ? "strong" : (k >= 0.4 ? "medium" : "weak");
  return r;
}

std::vector<LikertOutcome> likert_aggregate(const std::vector<RatingRecord>& records) {
  std::map<std::pair<std::string, std::string>, std::vector<int>> groups;
  for (const auto& r : records) {
    if (r.score < 1 || r.score > 4) {
      throw std::invalid_argument("likert_aggregate: score out of 1..4 for item " + r.item_id);
    }
    groups[{r.item_id, r.dimension}].push_back(r.score);
  }
  std::vector<LikertOutcome> out;
  for (const auto& [key, scores] : groups) {
    if (scores.size() < 2) {
      throw std::invalid_argument("likert_aggregate: item " + key.first + "/" + key.second +
                                  " has fewer than 2 raters");
    }
    LikertOutcome o;
    o.item_id = key.first;
    o.dimension = key.second;
    double sum = 0.0;
    for (int s : scores) sum += s;
    o.final_score = static_cast<int>(std::floor(sum / static_cast<double>(scores.size())));
    for (std::size_t i = 0; i < scores.size() && !o.divergent; ++i) {
      for (std::size_t j = i + 1; j < scores.size() && !o.divergent; ++j) {
        const bool sign_split = (scores[i] <= 2) != (scores[j] <= 2);
        const bool wide_gap = std::abs(scores[i] - scores[j]) > 1;
        if (sign_split || wide_gap) {
          o.divergent = true;
          o.divergence_rule = sign_split ? "sign-split" : "gap>1";
          o.needs_third_rater = true;
        }
      }
    }
    out.push_back(std::move(o));
  }
  return out;
}

double positive_rate_from_counts(const std::array<std::size_t, 4>& counts) {
  const std::size_t total = counts[0] + counts[1] + counts[2] + counts[3];
  if (total == 0) return 0.0;
  return static_cast<double>(counts[2] + counts[3]) / static_cast<double>(total);
}

RatingDistribution rating_distribution(const std::vector<RatingRecord>& records) {
  RatingDistribution d;
  for (const auto& r : records) {
    if (r.score < 1 || r.score > 4) {
      throw std::invalid_argument("rating_distribution: score out of 1..4");
    }
    auto it = d.counts.find(r.dimension);
    if (it == d.counts.end()) it = d.counts.emplace(r.dimension, std::array<std::size_t, 4>{}).first;
    ++it->second[static_cast<std::size_t>(r.score - 1)];
  }
  for (const auto& [dim, counts] : d.counts) d.positive_rate[dim] = positive_rate_from_counts(counts);
  return d;
}

std::vector<Prediction> read_predictions_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_predictions_jsonl: cannot open " + path);
  std::vector<Prediction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("read_predictions_jsonl: bad JSON at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    const std::string id = j.at("id");
    const Label gold = label_from_name(j.at("gold_label"));
    if (gold == Label::unparseable) {
      throw std::runtime_error("read_predictions_jsonl: gold_label must be Vulnerable or Safe");
    }
    out.push_back(resolve_prediction(id, gold, j.at("samples").get<std::vector<std::string>>()));
  }
  return out;
}

void write_predictions_jsonl(const std::string& path, const std::vector<Prediction>& preds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_predictions_jsonl: cannot open " + path);
  for (const auto& p : preds) {
    // Model samples are raw byte strings and may not be valid UTF-8; replace
    // offending bytes rather than refusing to serialize.
    out << json{{"id", p.id}, {"gold_label", label_name(p.gold)}, {"samples", p.samples}}.dump(
               -1, ' ', false, json::error_handler_t::replace)
        << "\n";
  }
}

std::vector<RatingRecord> read_ratings_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_ratings_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "item_id,rater_id,dimension,score") {
    throw std::runtime_error("read_ratings_csv: bad header in " + path);
  }
  std::vector<RatingRecord> out;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::istringstream is(line);
    RatingRecord r;
    std::string field;
    std::getline(is, r.item_id, ',');
    std::getline(is, r.rater_id, ',');
    std::getline(is, r.dimension, ',');
    std::getline(is, field, ',');
    r.score = std::stoi(field);
    out.push_back(std::move(r));
  }
  return out;
}

void write_ratings_csv(const std::string& path, const std::vector<RatingRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_ratings_csv: cannot open " + path);
  out << "item_id,rater_id,dimension,score\n";
  for (const auto& r : records) {
    out << r.item_id << "," << r.rater_id << "," << r.dimension << "," << r.score << "\n";
  }
}

void write_eval_report(const std::string& path, const DetectionMetrics& metrics,
                       const std::vector<std::pair<std::string, KappaResult>>& kappas,
                       const RatingDistribution& ratings) {
  json kj = json::object();
  for (const auto& [pair_name, k] : kappas) {
    kj[pair_name] = {{"kappa", k.kappa},      {"p_observed", k.p_observed},
                     {"p_expected", k.p_expected}, {"n", k.n},
                     {"defined", k.defined},  {"band", k.band}};
  }
  json rj = json::object();
  for (const auto& [dim, counts] : ratings.counts) {
    rj[dim] = {{"counts", counts}, {"positive_rate", ratings.positive_rate.at(dim)}};
  }
  json doc = {{"metrics",
               {{"accuracy", metrics.accuracy},
                {"precision", metrics.precision},
                {"recall", metrics.recall},
                {"f1", metrics.f1},
                {"zero_denominator", metrics.zero_denominator}}},
              {"confusion",
               {{"tp", metrics.counts.tp},
                {"fp", metrics.counts.fp},
                {"tn", metrics.counts.tn},
                {"fn", metrics.counts.fn}}},
              {"kappa", kj},
              {"ratings", rj},
              {"misclassified_ids", metrics.misclassified_ids}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_eval_report: cannot open " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace moetune
