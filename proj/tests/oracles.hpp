#pragma once

#include "delta/generate.hpp"
#include "delta/rng.hpp"
#include "delta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace delta::testing {

// Logits that are a fixed pseudo-random function of the whole prefix.
class PrefixHashSource final : public LogitSource {
  public:
    PrefixHashSource(int vocab, double shift = 0.0, bool uniform = false)
        : vocab_(vocab), shift_(shift), uniform_(uniform) {}
    int vocab_size() const override { return vocab_; }
    int max_seq_len() const override { return 64; }

    std::vector<double> next(std::span<const TokenId> prefix) const {
        std::vector<double> row(static_cast<std::size_t>(vocab_), shift_);
        if (uniform_) {
            return row;
        }
        std::uint64_t h = 1469598103934665603ULL;
        for (TokenId t : prefix) {
            h = (h ^ static_cast<std::uint64_t>(t)) * 1099511628211ULL;
        }
        SplitMix64 rng(h);
        for (double &v : row) {
            v += 2.0 * rng.normal();
        }
        return row;
    }

    Tensor sequence_logits(std::span<const TokenId> ids) const override {
        Tensor out({ids.size(), static_cast<std::size_t>(vocab_)});
        for (std::size_t t = 0; t < ids.size(); ++t) {
            auto row = next(ids.first(t + 1));
            std::copy(row.begin(), row.end(), out.row(t).begin());
        }
        return out;
    }

    std::unique_ptr<StepDecoder> decoder() const override {
        struct Dec final : StepDecoder {
            const PrefixHashSource *src;
            std::vector<TokenId> prefix;
            std::vector<double> row;
            const std::vector<double> &step(TokenId id) override {
                prefix.push_back(id);
                row = src->next(prefix);
                return row;
            }
        };
        auto d = std::make_unique<Dec>();
        d->src = this;
        return d;
    }

  private:
    int vocab_;
    double shift_;
    bool uniform_;
};

inline std::size_t exhaustive_lcs(const std::vector<std::string> &a, const std::vector<std::string> &b) {
    std::size_t best = 0;
    for (std::uint32_t mask = 0; mask < (1u << a.size()); ++mask) {
        std::vector<std::string> sub;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (mask & (1u << i)) {
                sub.push_back(a[i]);
            }
        }
        std::size_t j = 0;
        for (std::size_t i = 0; i < b.size() && j < sub.size(); ++i) {
            if (b[i] == sub[j]) {
                ++j;
            }
        }
        if (j == sub.size()) {
            best = std::max(best, sub.size());
        }
    }
    return best;
}

// Product of per-token softmax probabilities, then the geometric mean.
inline double chain_rule_probability(const PrefixHashSource &src, std::vector<TokenId> prefix,
                                     const std::vector<TokenId> &answer) {
    double log_p = 0.0;
    for (TokenId t : answer) {
        log_p += std::log(softmax(src.next(prefix))[static_cast<std::size_t>(t)]);
        prefix.push_back(t);
    }
    return std::exp(log_p / static_cast<double>(answer.size()));
}

} // namespace delta::testing
