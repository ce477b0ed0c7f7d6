#pragma once

#include "delta/tokenizer.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace delta {

// A question/answer pair laid out as BOS question SEP answer EOS.
struct TokenizedQA {
    std::string id;
    std::vector<TokenId> ids;
    std::size_t answer_start = 0; // index in ids of the first answer token

    // Model input: every token except the last.
    std::vector<TokenId> inputs() const { return {ids.begin(), ids.end() - 1}; }
    // Rows of the input logits that predict answer tokens and the closing EOS.
    std::vector<std::size_t> answer_rows() const;
    std::vector<TokenId> answer_targets() const;
    // Number of answer tokens, EOS excluded.
    std::size_t answer_length() const { return ids.size() - 1 - answer_start; }
};

std::vector<TokenId> prompt_ids(const Tokenizer &tok, const std::string &question);
TokenizedQA tokenize_qa(const Tokenizer &tok, const std::string &id, const std::string &question,
                        const std::string &answer);

} // namespace delta
