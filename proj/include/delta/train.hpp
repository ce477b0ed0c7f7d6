#pragma once

#include "delta/model.hpp"
#include "delta/rng.hpp"
#include "delta/sequence.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace delta {

struct TrainConfig {
    int epochs = 5;
    int batch_size = 32;
    double lr = 1e-3;
    double clip_norm = 1.0; // <= 0 disables clipping
    std::uint64_t seed = 0;
};

// Shuffled index batches covering [0, n) once. The last batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, SplitMix64 &rng);

// Token-averaged NLL of the answer (and EOS) of one example, on the tape.
Var answer_nll(Var answer_logits, const TokenizedQA &qa);

// Called after every epoch with the epoch index (1-based) and mean batch loss.
using EpochHook = std::function<void(int epoch, double mean_loss)>;

// Supervised next-token training on answer tokens. Returns per-epoch mean loss.
std::vector<double> finetune(LanguageModel &model, std::span<const TokenizedQA> data, const TrainConfig &cfg,
                             const EpochHook &hook = {});

} // namespace delta
