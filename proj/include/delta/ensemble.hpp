#pragma once

#include "delta/generate.hpp"
#include "delta/model.hpp"
#include "delta/sequence.hpp"

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace delta {

// l_e = l_M + alpha * (l_prime - l_o) on plain tensors.
Tensor combine_logits(const Tensor &l_m, const Tensor &l_prime, const Tensor &l_o, double alpha);

// Frozen large model M, frozen offset model M_o and trainable offset model
// M'_o. The ensemble only references the models; callers own them.
class OffsetEnsemble final : public LogitSource {
  public:
    OffsetEnsemble(const LanguageModel &large, const LanguageModel &offset_frozen, LanguageModel &offset_trainable,
                   double alpha);

    double alpha() const { return alpha_; }
    void set_alpha(double alpha);

    const LanguageModel &large() const { return *large_; }
    const LanguageModel &offset_frozen() const { return *offset_frozen_; }
    LanguageModel &offset_trainable() const { return *offset_trainable_; }

    int vocab_size() const override { return large_->config().vocab_size; }
    int max_seq_len() const override;
    Tensor sequence_logits(std::span<const TokenId> ids) const override;
    std::unique_ptr<StepDecoder> decoder() const override;

  private:
    const LanguageModel *large_;
    const LanguageModel *offset_frozen_;
    LanguageModel *offset_trainable_;
    double alpha_;
};

// Softmax of the ensemble logits at position t of ids.
std::vector<double> ensemble_next_token_distribution(const OffsetEnsemble &ens, std::span<const TokenId> ids,
                                                     std::size_t t);

// Same ensemble with a different trainable offset model. The replacement must
// match the frozen offset model's config and tokenizer.
OffsetEnsemble swap_offset_pair(const OffsetEnsemble &ens, LanguageModel &replacement);

// Identifies a pair of frozen checkpoints.
Digest frozen_pair_digest(const LanguageModel &large, const LanguageModel &offset_frozen);

// Logit rows of M and M_o at the answer rows of each example, computed once
// before training.
class FrozenLogitCache {
  public:
    struct Entry {
        Tensor large;  // [answer rows, vocab]
        Tensor offset; // [answer rows, vocab]
    };

    FrozenLogitCache() = default;
    static FrozenLogitCache build(const LanguageModel &large, const LanguageModel &offset_frozen,
                                  std::span<const TokenizedQA> examples);

    bool contains(const std::string &id) const { return entries_.count(id) != 0; }
    const Entry &at(const std::string &id) const;
    std::size_t size() const { return entries_.size(); }
    const Digest &frozen_digest() const { return frozen_digest_; }
    const Digest &large_digest() const { return large_digest_; }

    // Throws StaleCacheError unless the cache was built from these models.
    void verify(const LanguageModel &large, const LanguageModel &offset_frozen) const;
    void verify_large(const LanguageModel &large) const;

    // Inserts or replaces one entry; used to build synthetic caches in tests.
    void put(const std::string &id, Entry entry) { entries_[id] = std::move(entry); }

    std::vector<std::uint8_t> to_bytes() const;
    static FrozenLogitCache from_bytes(std::span<const std::uint8_t> bytes);
    void save(const std::string &path) const;
    static FrozenLogitCache load(const std::string &path);
    Digest content_digest() const;

  private:
    Digest frozen_digest_{};
    Digest large_digest_{};
    std::map<std::string, Entry> entries_;
};

} // namespace delta
