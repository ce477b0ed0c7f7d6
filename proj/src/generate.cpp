#include "delta/generate.hpp"

#include "delta/error.hpp"

namespace delta {

namespace {

class ModelStepDecoder final : public StepDecoder {
  public:
    explicit ModelStepDecoder(const LanguageModel &m) : dec_(m) {}
    const std::vector<double> &step(TokenId id) override { return dec_.step(id); }

  private:
    Decoder dec_;
};

} // namespace

std::unique_ptr<StepDecoder> ModelSource::decoder() const { return std::make_unique<ModelStepDecoder>(model_); }

TokenId argmax_lowest(std::span<const double> logits) {
    DELTA_CHECK(!logits.empty(), ContractError, "argmax of empty logits");
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) {
            best = i;
        }
    }
    return static_cast<TokenId>(best);
}

std::vector<TokenId> greedy_generate(const LogitSource &source, std::span<const TokenId> prompt, int max_new) {
    DELTA_CHECK(!prompt.empty(), ContractError, "greedy_generate needs a non-empty prompt");
    DELTA_CHECK(prompt.size() <= static_cast<std::size_t>(source.max_seq_len()), LengthError,
                "prompt of length " + std::to_string(prompt.size()) + " exceeds max_seq_len");
    auto dec = source.decoder();
    const std::vector<double> *logits = nullptr;
    for (TokenId id : prompt) {
        logits = &dec->step(id);
    }
    std::vector<TokenId> out;
    std::size_t len = prompt.size();
    for (int i = 0; i < max_new; ++i) {
        TokenId next = argmax_lowest(*logits);
        if (next == Tokenizer::kEos) {
            break;
        }
        out.push_back(next);
        ++len;
        if (i + 1 == max_new || len >= static_cast<std::size_t>(source.max_seq_len())) {
            break;
        }
        logits = &dec->step(next);
    }
    return out;
}

} // namespace delta
