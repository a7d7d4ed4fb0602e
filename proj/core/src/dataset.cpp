#include "moetune/dataset.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "moetune/tokenizer.hpp"

namespace moetune {

using nlohmann::json;

void InstructionExample::validate() const {
  if (label.empty() || explanation.empty()) {
    throw std::invalid_argument("InstructionExample: training records need label and explanation");
  }
}

const std::vector<std::string>& vulnerability_classes() {
  static const std::vector<std::string> kClasses = {"reentrancy", "timestamp", "integer-overflow",
                                                    "delegatecall"};
  return kClasses;
}

namespace {

struct Dialect {
  const char* type;
  std::vector<const char*> names;  // per-dialect identifier pool
  const char* vuln_code;           // %N = name slot
  const char* safe_code;
  const char* vuln_expl;
  const char* safe_expl;
};

// Four keyword-disjoint dialects; identifier pools do not overlap so routing
// separation is observable on synthetic data.
const std::vector<Dialect>& dialects() {
  static const std::vector<Dialect> kDialects = {
      {"reentrancy",
       {"pull", "drain", "cashout", "redeem"},
       "function %N(){ msg.sender.call{value:bal}(); bal=0; }",
       "function %N(){ bal=0; msg.sender.call{value:old}(); }",
       "External call precedes the state update, so reentrant callers can drain funds.",
       "State is cleared before the external call, blocking reentrant drains."},
      {"timestamp",
       {"spin", "lottery", "raffle", "jackpot"},
       "function %N(){ if(block.timestamp%7==0) win(); }",
       "function %N(){ if(oracle.rand()%7==0) win(); }",
       "Block timestamp drives the payout branch, so miners can bias the outcome.",
       "No block timestamp reaches the payout logic."},
      {"integer-overflow",
       {"addfee", "tally", "accrue", "summate"},
       "function %N(uint8 a,uint8 b){ fee=a+b; }",
       "function %N(uint8 a,uint8 b){ require(a<=255-b); fee=a+b; }",
       "Unchecked uint8 addition can wrap past its maximum.",
       "The bound check prevents the addition from wrapping."},
      {"delegatecall",
       {"proxy", "forward", "relay", "dispatch"},
       "function %N(address t,bytes d){ t.delegatecall(d); }",
       "function %N(bytes d){ require(msg.sender==owner); impl.delegatecall(d); }",
       "Delegatecall targets a caller-chosen address, handing over storage control.",
       "Delegatecall is pinned to a trusted implementation."}};
  return kDialects;
}

std::string fill_name(const char* tmpl, const std::string& name) {
  std::string out(tmpl);
  auto pos = out.find("%N");
  if (pos != std::string::npos) out.replace(pos, 2, name);
  return out;
}

}  // namespace

std::vector<InstructionExample> synth_instruction_dataset(std::size_t per_type,
                                                          unsigned long long seed,
                                                          double vulnerable_fraction) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::vector<InstructionExample> out;
  out.reserve(per_type * dialects().size());
  for (const auto& d : dialects()) {
    for (std::size_t i = 0; i < per_type; ++i) {
      const bool vulnerable = coin(rng) < vulnerable_fraction;
      const std::string name = d.names[rng() % d.names.size()] + std::to_string(rng() % 10);
      InstructionExample ex;
      ex.instruction = "Audit:";
      ex.vulnerability_type = d.type;
      ex.code = fill_name(vulnerable ? d.vuln_code : d.safe_code, name);
      ex.label = vulnerable ? "Vulnerable" : "Safe";
      ex.explanation = vulnerable ? d.vuln_expl : d.safe_expl;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<std::string> synth_pretrain_corpus(std::size_t n_docs, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> docs;
  docs.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const auto& d = dialects()[rng() % dialects().size()];
    const std::string name = d.names[rng() % d.names.size()] + std::to_string(rng() % 10);
    std::string doc = "contract C { ";
    doc += fill_name(rng() % 2 ? d.vuln_code : d.safe_code, name);
    doc += " }";
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<InstructionExample> read_examples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_examples_jsonl: cannot open " + path);
  std::vector<InstructionExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    InstructionExample ex;
    ex.instruction = j.value("instruction", "");
    ex.code = j.at("code").get<std::string>();
    ex.label = j.at("label").get<std::string>();
    ex.vulnerability_type = j.value("vulnerability_type", "other");
    ex.explanation = j.value("explanation", "");
    out.push_back(std::move(ex));
  }
  return out;
}

void write_examples_jsonl(const std::string& path, const std::vector<InstructionExample>& items) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_examples_jsonl: cannot open " + path);
  for (const auto& ex : items) {
    json j = {{"instruction", ex.instruction},
              {"code", ex.code},
              {"label", ex.label},
              {"vulnerability_type", ex.vulnerability_type},
              {"explanation", ex.explanation}};
    out << j.dump() << "\n";
  }
}

std::string render_prompt(const InstructionExample& ex) {
  return ex.instruction + "\n" + ex.code;
}

std::string render_target_label_line(const InstructionExample& ex) {
  return "LABEL: " + ex.label;
}

namespace {

struct PackedSeq {
  std::vector<int> tokens;
  std::vector<SpanTag> tags;
};

PackedSeq pack_one(const InstructionExample& ex, std::size_t cutoff_len) {
  ex.validate();
  const std::string prompt = render_prompt(ex);
  const std::string label_line = render_target_label_line(ex);

  std::vector<int> tokens;
  std::vector<SpanTag> region;  // region of each token
  auto push = [&](int t, SpanTag r) {
    tokens.push_back(t);
    region.push_back(r);
  };
  push(tok::kBos, SpanTag::prompt);
  for (unsigned char c : prompt) push(c, SpanTag::prompt);
  push(tok::kSep, SpanTag::prompt);
  const std::size_t fixed = tokens.size() + label_line.size() + 2;  // + SEP + EOS
  if (fixed + 1 > cutoff_len) {
    throw std::invalid_argument("pack_examples: prompt and label do not fit cutoff length");
  }
  for (unsigned char c : label_line) push(c, SpanTag::detection);
  push(tok::kSep, SpanTag::detection);
  std::size_t expl_budget = cutoff_len - tokens.size() - 1;
  for (std::size_t i = 0; i < ex.explanation.size() && i < expl_budget; ++i) {
    push(static_cast<unsigned char>(ex.explanation[i]), SpanTag::explanation);
  }
  push(tok::kEos, SpanTag::explanation);

  PackedSeq ps;
  ps.tokens = std::move(tokens);
  // Position i predicts token i+1; tag it with the region of the target.
  ps.tags.resize(ps.tokens.size(), SpanTag::padding);
  for (std::size_t i = 0; i + 1 < ps.tokens.size(); ++i) ps.tags[i] = region[i + 1];
  return ps;
}

}  // namespace

SpanLabeledBatch pack_examples(const std::vector<InstructionExample>& items,
                               std::size_t cutoff_len) {
  SpanLabeledBatch batch;
  for (const auto& ex : items) {
    PackedSeq ps = pack_one(ex, cutoff_len);
    batch.tokens.push_back(std::move(ps.tokens));
    batch.span_tags.push_back(std::move(ps.tags));
  }
  batch.validate();
  return batch;
}

std::vector<int> prompt_tokens(const InstructionExample& ex, std::size_t cutoff_len) {
  const std::string prompt = render_prompt(ex);
  std::vector<int> tokens;
  tokens.push_back(tok::kBos);
  for (unsigned char c : prompt) {
    if (tokens.size() + 1 >= cutoff_len) break;
    tokens.push_back(c);
  }
  tokens.push_back(tok::kSep);
  return tokens;
}

}  // namespace moetune
