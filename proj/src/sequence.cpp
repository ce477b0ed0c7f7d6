#include "delta/sequence.hpp"

#include "delta/error.hpp"

namespace delta {

std::vector<std::size_t> TokenizedQA::answer_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t r = answer_start - 1; r + 1 < ids.size(); ++r) {
        rows.push_back(r);
    }
    return rows;
}

std::vector<TokenId> TokenizedQA::answer_targets() const { return {ids.begin() + answer_start, ids.end()}; }

std::vector<TokenId> prompt_ids(const Tokenizer &tok, const std::string &question) {
    std::vector<TokenId> ids{Tokenizer::kBos};
    for (TokenId t : tok.encode(question)) {
        ids.push_back(t);
    }
    ids.push_back(Tokenizer::kSep);
    return ids;
}

TokenizedQA tokenize_qa(const Tokenizer &tok, const std::string &id, const std::string &question,
                        const std::string &answer) {
    TokenizedQA qa;
    qa.id = id;
    qa.ids = prompt_ids(tok, question);
    qa.answer_start = qa.ids.size();
    std::vector<TokenId> a = tok.encode(answer);
    DELTA_CHECK(!a.empty(), ContractError, "example '" + id + "' has an empty answer");
    qa.ids.insert(qa.ids.end(), a.begin(), a.end());
    qa.ids.push_back(Tokenizer::kEos);
    return qa;
}

} // namespace delta
