#include "steerlab/tinylmm/tokenizer.hpp"

#include "steerlab/error.hpp"

namespace steerlab::tinylmm::tokenizer {

TokenSequence encode(std::string_view text) {
  TokenSequence out;
  out.reserve(text.size());
  for (const char ch : text) {
    const auto b = static_cast<unsigned char>(ch);
    if (b <= static_cast<unsigned char>(kEos)) {
      throw ArgumentError("text contains reserved control byte " + std::to_string(b));
    }
    out.push_back(static_cast<TokenId>(b));
  }
  return out;
}

std::string decode(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (const TokenId t : tokens) {
    if (t > kEos && t < kVocabSize) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

TokenSequence prompt_tokens(std::string_view prompt) {
  TokenSequence out{kBos};
  const TokenSequence body = encode(prompt);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kSep);
  return out;
}

TokenSequence training_tokens(std::string_view prompt, std::string_view response) {
  TokenSequence out = prompt_tokens(prompt);
  const TokenSequence body = encode(response);
  out.insert(out.end(), body.begin(), body.end());
  out.push_back(kEos);
  return out;
}

}  // namespace steerlab::tinylmm::tokenizer
