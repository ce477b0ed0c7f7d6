#pragma once

#include "delta/digest.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace delta {

using TokenId = std::int32_t;

// Closed-vocabulary word-level tokenizer. Text is split into pieces, each a
// run of word characters or a single other character, with at most one
// leading space attached. Concatenating pieces reproduces the input exactly.
class Tokenizer {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kBos = 1;
    static constexpr TokenId kEos = 2;
    static constexpr TokenId kSep = 3;
    static constexpr int kNumSpecial = 4;

    Tokenizer();
    // Vocabulary over every piece occurring in the given texts, in sorted order.
    static Tokenizer build(std::span<const std::string> texts);

    static std::vector<std::string> split_pieces(std::string_view text);

    std::vector<TokenId> encode(std::string_view text) const;
    // Special ids are dropped from the output.
    std::string decode(std::span<const TokenId> ids) const;

    // Pieces of text not covered by the vocabulary (empty when fully covered).
    std::vector<std::string> missing_pieces(std::string_view text) const;

    std::size_t size() const { return pieces_.size(); }
    const std::string &piece(TokenId id) const;
    bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecial; }

    std::string to_json() const;
    static Tokenizer from_json(std::string_view json);
    void save(const std::string &path) const;
    static Tokenizer load(const std::string &path);

    // Digest of the canonical JSON form; stamped into model checkpoints.
    Digest digest() const;

  private:
    std::vector<std::string> pieces_;
    std::map<std::string, TokenId, std::less<>> index_;
};

} // namespace delta
