#pragma once

#include <string>
#include <vector>

namespace moetune {

// Byte-level tokenizer: ids 0..255 are raw byte values, followed by the
// special tokens below. Reversible on byte content.
namespace tok {
constexpr int kPad = 256;
constexpr int kBos = 257;
constexpr int kEos = 258;
constexpr int kSep = 259;
constexpr int kVocabSize = 260;
}  // namespace tok

/// [BOS, bytes..., EOS]
std::vector<int> tokenize(const std::string& text);

/// Inverse of tokenize on the byte content; special tokens are dropped.
std::string detokenize(const std::vector<int>& ids);

}  // namespace moetune
