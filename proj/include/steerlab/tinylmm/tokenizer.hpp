#pragma once

#include <span>
#include <string>
#include <string_view>

#include "steerlab/tinylmm/model.hpp"

// Byte-level tokenizer over a 256-entry vocabulary. Printable text never
// contains bytes 0..3, so those ids are reused for special tokens.
namespace steerlab::tinylmm::tokenizer {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kSep = 2;  // ends the prompt, starts the response
inline constexpr TokenId kEos = 3;
inline constexpr int kVocabSize = 256;

TokenSequence encode(std::string_view text);

// Special tokens are dropped.
std::string decode(std::span<const TokenId> tokens);

// [BOS] prompt [SEP]
TokenSequence prompt_tokens(std::string_view prompt);

// [BOS] prompt [SEP] response [EOS]
TokenSequence training_tokens(std::string_view prompt, std::string_view response);

}  // namespace steerlab::tinylmm::tokenizer
