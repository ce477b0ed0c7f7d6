#include "delta/train.hpp"

#include "delta/error.hpp"
#include "delta/optim.hpp"

namespace delta {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, SplitMix64 &rng) {
    DELTA_CHECK(batch_size > 0, ConfigurationError, "batch size must be positive");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

Var answer_nll(Var answer_logits, const TokenizedQA &qa) {
    std::vector<TokenId> targets = qa.answer_targets();
    return mean(nll_rows(answer_logits, targets));
}

std::vector<double> finetune(LanguageModel &model, std::span<const TokenizedQA> data, const TrainConfig &cfg,
                             const EpochHook &hook) {
    DELTA_CHECK(cfg.epochs >= 0 && cfg.batch_size > 0 && cfg.lr > 0.0, ConfigurationError,
                "finetune needs epochs >= 0, batch_size > 0 and lr > 0");
    DELTA_CHECK(!model.frozen(), ContractError, "finetune called on a frozen model");
    DELTA_CHECK(!data.empty() || cfg.epochs == 0, ContractError, "finetune called with no data");
    Adam opt(AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, cfg.clip_norm});
    SplitMix64 rng(cfg.seed);
    std::vector<Parameter *> params = model.param_ptrs();
    std::vector<double> epoch_loss;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double total = 0.0;
        std::size_t n_batches = 0;
        for (const auto &batch : epoch_batches(data.size(), static_cast<std::size_t>(cfg.batch_size), rng)) {
            Tape tape;
            std::vector<Var> leaves = model.leaves(tape);
            Var loss;
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const TokenizedQA &qa = data[batch[k]];
                std::vector<TokenId> in = qa.inputs();
                std::vector<std::size_t> rows = qa.answer_rows();
                Var l = answer_nll(select_rows(model.forward(leaves, in), rows), qa);
                loss = k == 0 ? l : add(loss, l);
            }
            loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
            model.zero_grad();
            tape.backward(loss);
            opt.step(params);
            total += loss.value().item();
            ++n_batches;
        }
        model.zero_grad();
        epoch_loss.push_back(total / static_cast<double>(n_batches));
        if (hook) {
            hook(epoch, epoch_loss.back());
        }
    }
    return epoch_loss;
}

} // namespace delta
