#pragma once

#include "delta/model.hpp"

#include <memory>
#include <span>
#include <vector>

namespace delta {

// Anything that yields next-token logits: a single model or an ensemble.
class StepDecoder {
  public:
    virtual ~StepDecoder() = default;
    virtual const std::vector<double> &step(TokenId id) = 0;
};

class LogitSource {
  public:
    virtual ~LogitSource() = default;
    virtual int vocab_size() const = 0;
    virtual int max_seq_len() const = 0;
    // Logits for every position of ids, shape [T, vocab].
    virtual Tensor sequence_logits(std::span<const TokenId> ids) const = 0;
    virtual std::unique_ptr<StepDecoder> decoder() const = 0;
};

class ModelSource final : public LogitSource {
  public:
    explicit ModelSource(const LanguageModel &model) : model_(model) {}
    int vocab_size() const override { return model_.config().vocab_size; }
    int max_seq_len() const override { return model_.config().max_seq_len; }
    Tensor sequence_logits(std::span<const TokenId> ids) const override { return model_.logits(ids); }
    std::unique_ptr<StepDecoder> decoder() const override;

  private:
    const LanguageModel &model_;
};

// Index of the largest value; ties go to the lowest index.
TokenId argmax_lowest(std::span<const double> logits);

// Greedy continuation of prompt until EOS (excluded from the result) or
// max_new tokens, truncated so the sequence never exceeds max_seq_len.
std::vector<TokenId> greedy_generate(const LogitSource &source, std::span<const TokenId> prompt, int max_new);

} // namespace delta
