#pragma once

#include <random>
#include <string>
#include <vector>

#include "moetune/losses.hpp"

namespace moetune {

struct InstructionExample {
  std::string instruction;
  std::string code;
  std::string label;               // "Vulnerable" or "Safe"
  std::string vulnerability_type;  // reentrancy | timestamp | integer-overflow | delegatecall | other
  std::string explanation;
  void validate() const;  // training records need label and explanation
};

const std::vector<std::string>& vulnerability_classes();  // the four dialects

/// Synthetic instruction dataset: four keyword-disjoint vulnerability
/// dialects plus safe variants of each, deterministic in the seed.
std::vector<InstructionExample> synth_instruction_dataset(std::size_t per_type,
                                                          unsigned long long seed,
                                                          double vulnerable_fraction = 0.5);

/// Plain-text documents over the same dialect vocabulary, for the
/// continual pre-training stage.
std::vector<std::string> synth_pretrain_corpus(std::size_t n_docs, unsigned long long seed);

std::vector<InstructionExample> read_examples_jsonl(const std::string& path);
void write_examples_jsonl(const std::string& path, const std::vector<InstructionExample>& items);

/// Prompt text fed to the model (everything before the target spans).
std::string render_prompt(const InstructionExample& ex);
/// Target text: "LABEL: <label>" line then the explanation.
std::string render_target_label_line(const InstructionExample& ex);

/// Packs examples as [BOS prompt SEP label-line SEP explanation EOS],
/// truncated to cutoff_len tokens. Prompt positions are masked out of the
/// loss; the label line is the detection span; the explanation and closing
/// EOS are the explanation span.
SpanLabeledBatch pack_examples(const std::vector<InstructionExample>& items,
                               std::size_t cutoff_len);

/// Token sequence of the prompt portion only (BOS .. SEP), for inference.
std::vector<int> prompt_tokens(const InstructionExample& ex, std::size_t cutoff_len);

}  // namespace moetune
