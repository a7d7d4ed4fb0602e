#include "moetune/tokenizer.hpp"

namespace moetune {

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> ids;
  ids.reserve(text.size() + 2);
  ids.push_back(tok::kBos);
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  ids.push_back(tok::kEos);
  return ids;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

}  // namespace moetune
