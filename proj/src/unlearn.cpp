#include "delta/unlearn.hpp"

#include "delta/error.hpp"
#include "delta/optim.hpp"
#include "delta/rng.hpp"

#include <cmath>
#include <sstream>

namespace delta {

std::string to_string(Algorithm a) {
    switch (a) {
    case Algorithm::gradient_ascent:
        return "gradient_ascent";
    case Algorithm::gradient_difference:
        return "gradient_difference";
    case Algorithm::kl_minimization:
        return "kl_minimization";
    case Algorithm::data_relabeling:
        return "data_relabeling";
    }
    return "?";
}

Algorithm algorithm_from_string(const std::string &s) {
    for (Algorithm a : kAllAlgorithms) {
        if (to_string(a) == s) {
            return a;
        }
    }
    if (s == "ga") {
        return Algorithm::gradient_ascent;
    }
    if (s == "gd") {
        return Algorithm::gradient_difference;
    }
    if (s == "kl") {
        return Algorithm::kl_minimization;
    }
    if (s == "relabel") {
        return Algorithm::data_relabeling;
    }
    throw ConfigurationError("unknown algorithm '" + s + "'");
}

std::string to_string(Mode m) { return m == Mode::offset ? "offset" : "direct"; }

Mode mode_from_string(const std::string &s) {
    if (s == "offset") {
        return Mode::offset;
    }
    if (s == "direct") {
        return Mode::direct;
    }
    throw ConfigurationError("mode must be 'offset' or 'direct', got '" + s + "'");
}

int effective_batch_size(const UnlearnConfig &cfg, std::size_t forget_size) {
    DELTA_CHECK(cfg.batch_size > 0, ConfigurationError, "batch_size must be positive");
    if (forget_size >= static_cast<std::size_t>(kReferenceForgetSize)) {
        return cfg.batch_size;
    }
    const double scaled = static_cast<double>(cfg.batch_size) * static_cast<double>(forget_size) / kReferenceForgetSize;
    return std::max(1, static_cast<int>(std::lround(scaled)));
}

UnlearnData make_unlearn_data(const Tokenizer &tok, const DatasetSplits &splits) {
    UnlearnData d;
    for (const QAExample &e : splits.forget) {
        d.forget.push_back(tokenize_qa(tok, e.id, e.question, e.answer));
    }
    for (const QAExample &e : splits.retain) {
        d.retain.push_back(tokenize_qa(tok, e.id, e.question, e.answer));
    }
    for (const QAExample &e : relabel_forget_set(splits)) {
        d.relabeled.push_back(tokenize_qa(tok, e.id + "/relabel", e.question, e.relabel_answer));
    }
    return d;
}

std::vector<TokenizedQA> cache_examples(const UnlearnData &data) {
    std::vector<TokenizedQA> all = data.forget;
    all.insert(all.end(), data.retain.begin(), data.retain.end());
    all.insert(all.end(), data.relabeled.begin(), data.relabeled.end());
    return all;
}

Objective::Objective(Tape &tape, const OffsetEnsemble &ens, double alpha, const FrozenLogitCache *cache)
    : tape_(tape), ens_(&ens), alpha_(alpha), cache_(cache) {
    DELTA_CHECK(alpha >= 0.0, ConfigurationError, "alpha_train must be nonnegative");
    leaves_ = ens.offset_trainable().leaves(tape);
}

Objective::Objective(Tape &tape, LanguageModel &model, const FrozenLogitCache *cache)
    : tape_(tape), model_(&model), cache_(cache) {
    leaves_ = model.leaves(tape);
}

namespace {

Tensor gather_rows(const Tensor &full, const std::vector<std::size_t> &rows) {
    const std::size_t V = full.cols();
    Tensor out({rows.size(), V});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(full.row(rows[i]).data(), V, out.data() + i * V);
    }
    return out;
}

} // namespace

Var Objective::answer_logits(const TokenizedQA &qa) {
    std::vector<TokenId> in = qa.inputs();
    std::vector<std::size_t> rows = qa.answer_rows();
    if (model_) {
        return select_rows(model_->forward(leaves_, in), rows);
    }
    Var l_prime = select_rows(ens_->offset_trainable().forward(leaves_, in), rows);
    Var l_m, l_o;
    if (cache_) {
        const FrozenLogitCache::Entry &e = cache_->at(qa.id);
        l_m = tape_.constant(e.large);
        l_o = tape_.constant(e.offset);
    } else {
        l_m = tape_.constant(gather_rows(ens_->large().logits(in), rows));
        l_o = tape_.constant(gather_rows(ens_->offset_frozen().logits(in), rows));
    }
    return combine_logits(l_m, l_prime, l_o, alpha_);
}

Var Objective::nll(const std::vector<const TokenizedQA *> &batch) {
    DELTA_CHECK(!batch.empty(), ContractError, "loss on an empty batch");
    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Var l = answer_nll(answer_logits(*batch[i]), *batch[i]);
        total = i == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
}

Var Objective::kl(const std::vector<const TokenizedQA *> &batch) {
    DELTA_CHECK(!batch.empty(), ContractError, "KL term on an empty batch");
    DELTA_CHECK(cache_ != nullptr, ContractError, "KL term needs the cached reference distribution");
    Var total;
    std::size_t n_rows = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor &ref = cache_->at(batch[i]->id).large;
        Var l = sum(kl_rows(ref, answer_logits(*batch[i])));
        n_rows += ref.rows();
        total = i == 0 ? l : add(total, l);
    }
    return scale(total, 1.0 / static_cast<double>(n_rows));
}

Var loss_ga(Objective &obj, const std::vector<const TokenizedQA *> &forget) { return obj.nll(forget); }

Var loss_gd(Objective &obj, const std::vector<const TokenizedQA *> &forget,
            const std::vector<const TokenizedQA *> &retain, double retain_weight) {
    Var f = scale(obj.nll(forget), -1.0);
    if (retain.empty()) {
        return f;
    }
    return add(f, scale(obj.nll(retain), retain_weight));
}

Var loss_kl(Objective &obj, const std::vector<const TokenizedQA *> &forget,
            const std::vector<const TokenizedQA *> &retain, double kl_weight) {
    Var f = scale(obj.nll(forget), -1.0);
    return add(f, scale(obj.kl(retain), kl_weight));
}

Var loss_relabel(Objective &obj, const std::vector<const TokenizedQA *> &relabeled) { return obj.nll(relabeled); }

Var training_objective(Objective &obj, const UnlearnConfig &cfg, const std::vector<const TokenizedQA *> &forget,
                       const std::vector<const TokenizedQA *> &retain,
                       const std::vector<const TokenizedQA *> &relabeled) {
    switch (cfg.algorithm) {
    case Algorithm::gradient_ascent:
        return scale(loss_ga(obj, forget), -1.0);
    case Algorithm::gradient_difference:
        return loss_gd(obj, forget, retain, cfg.retain_weight);
    case Algorithm::kl_minimization:
        return loss_kl(obj, forget, retain, cfg.kl_weight);
    case Algorithm::data_relabeling:
        return loss_relabel(obj, relabeled);
    }
    throw ContractError("unhandled algorithm");
}

namespace {

void check_config(const UnlearnConfig &cfg, const UnlearnData &data) {
    DELTA_CHECK(cfg.epochs >= 0, ConfigurationError, "epochs must be nonnegative");
    DELTA_CHECK(cfg.learning_rate > 0.0 && std::isfinite(cfg.learning_rate), ConfigurationError,
                "learning rate must be positive");
    DELTA_CHECK(cfg.alpha_train >= 0.0, ConfigurationError, "alpha_train must be nonnegative");
    DELTA_CHECK(!data.forget.empty(), ContractError, "unlearning needs a non-empty forget set");
    if (cfg.algorithm == Algorithm::data_relabeling) {
        DELTA_CHECK(data.relabeled.size() == data.forget.size(), ContractError,
                    "relabeled set does not match the forget set");
    }
    if (cfg.algorithm == Algorithm::kl_minimization) {
        DELTA_CHECK(!data.retain.empty(), ContractError, "KL minimization needs a retain set");
    }
}

// Shared optimization loop. make_objective builds the loss for one batch on a
// fresh tape; evaluate scores the current state for the trajectory.
template <class MakeLoss, class Evaluate>
UnlearnResult run_loop(const UnlearnData &data, const UnlearnConfig &cfg, LanguageModel &trainable,
                       MakeLoss make_loss, Evaluate evaluate, bool log_trajectory) {
    UnlearnResult res;
    if (cfg.algorithm == Algorithm::gradient_difference && data.retain.empty()) {
        res.warnings.push_back("retain set is empty; gradient difference reduces to gradient ascent");
    }
    const std::size_t n = data.forget.size();
    const auto bs = static_cast<std::size_t>(effective_batch_size(cfg, n));
    Adam opt(AdamOptions{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.clip_norm});
    SplitMix64 batch_rng(derive_seed(cfg.seed, "unlearn.batches"));
    SplitMix64 retain_rng(derive_seed(cfg.seed, "unlearn.retain"));
    std::vector<Parameter *> params = trainable.param_ptrs();

    TrajectoryRow initial;
    if (log_trajectory) {
        initial = evaluate();
        initial.step = 0;
    }
    int step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (const auto &idx : epoch_batches(n, bs, batch_rng)) {
            std::vector<const TokenizedQA *> forget, relabeled, retain;
            for (std::size_t i : idx) {
                forget.push_back(&data.forget[i]);
                if (!data.relabeled.empty()) {
                    relabeled.push_back(&data.relabeled[i]);
                }
            }
            if (!data.retain.empty()) {
                for (std::size_t k = 0; k < idx.size(); ++k) {
                    retain.push_back(&data.retain[retain_rng.below(data.retain.size())]);
                }
            }
            Tape tape;
            Var loss = make_loss(tape, forget, retain, relabeled);
            trainable.zero_grad();
            tape.backward(loss);
            opt.step(params);
            const double lv = loss.value().item();
            res.step_losses.push_back(lv);
            if (step == 0) {
                initial.loss = lv;
            }
            epoch_loss += lv;
            ++epoch_steps;
            ++step;
        }
        if (log_trajectory) {
            if (epoch == 1) {
                res.trajectory.rows.push_back(initial);
            }
            TrajectoryRow row = evaluate();
            row.step = step;
            row.loss = epoch_loss / static_cast<double>(epoch_steps);
            res.trajectory.rows.push_back(row);
        }
    }
    if (log_trajectory && cfg.epochs == 0) {
        res.trajectory.rows.push_back(initial);
    }
    trainable.zero_grad();
    return res;
}

} // namespace

UnlearnResult unlearn_run(OffsetEnsemble &ens, const UnlearnData &data, const FrozenLogitCache &cache,
                          const UnlearnConfig &cfg, const TrajectoryEvaluator *evaluator) {
    check_config(cfg, data);
    DELTA_CHECK(cfg.mode == Mode::offset, ContractError, "unlearn_run trains the offset model; use direct mode API");
    DELTA_CHECK(ens.large().frozen() && ens.offset_frozen().frozen(), ContractError,
                "the large model and the frozen offset model must be marked frozen");
    LanguageModel &trainable = ens.offset_trainable();
    DELTA_CHECK(!trainable.frozen(), ContractError, "the trainable offset model is marked frozen");
    cache.verify(ens.large(), ens.offset_frozen());
    const Digest large_before = ens.large().content_digest();
    const Digest offset_before = ens.offset_frozen().content_digest();

    const double saved_alpha = ens.alpha();
    ens.set_alpha(cfg.alpha_train);
    UnlearnResult res;
    try {
        res = run_loop(
            data, cfg, trainable,
            [&](Tape &tape, const auto &f, const auto &r, const auto &rl) {
                Objective obj(tape, ens, cfg.alpha_train, &cache);
                return training_objective(obj, cfg, f, r, rl);
            },
            [&] { return (*evaluator)(ens); }, evaluator != nullptr);
    } catch (...) {
        ens.set_alpha(saved_alpha);
        throw;
    }
    ens.set_alpha(saved_alpha);

    if (ens.large().content_digest() != large_before || ens.offset_frozen().content_digest() != offset_before) {
        throw InvariantViolation("a frozen model changed during unlearning");
    }
    return res;
}

DirectResult direct_finetune_run(const LanguageModel &large, const UnlearnData &data, const FrozenLogitCache &cache,
                                 const UnlearnConfig &cfg, const TrajectoryEvaluator *evaluator) {
    check_config(cfg, data);
    cache.verify_large(large);
    const Digest before = large.content_digest();
    DirectResult out{large, {}};
    out.model.set_frozen(false);
    ModelSource source(out.model);
    out.result = run_loop(
        data, cfg, out.model,
        [&](Tape &tape, const auto &f, const auto &r, const auto &rl) {
            Objective obj(tape, out.model, &cache);
            return training_objective(obj, cfg, f, r, rl);
        },
        [&] { return (*evaluator)(source); }, evaluator != nullptr);
    if (large.content_digest() != before) {
        throw InvariantViolation("the canonical large model changed during direct fine-tuning");
    }
    return out;
}

LanguageModel retrain_baseline(const LanguageModel &base, std::span<const TokenizedQA> data, const TrainConfig &cfg) {
    LanguageModel m = base;
    m.set_frozen(false);
    finetune(m, data, cfg);
    return m;
}

std::string LrSearchResult::trials_csv() const {
    std::ostringstream os;
    os << "run,lr,forget_rouge,numerical_failure\n";
    for (std::size_t i = 0; i < trials.size(); ++i) {
        char lr[32];
        std::snprintf(lr, sizeof lr, "%.6e", trials[i].lr);
        os << i + 1 << ',' << lr << ',' << format_number(trials[i].forget_rouge) << ','
           << (trials[i].numerical_failure ? 1 : 0) << '\n';
    }
    return os.str();
}

LrSearchResult match_target_by_lr(const TrialFn &trial, const UnlearnConfig &base, double target,
                                  const LrSearchOptions &opts) {
    DELTA_CHECK(opts.lr_min > 0.0 && opts.lr_max > opts.lr_min, ConfigurationError, "invalid learning-rate bounds");
    DELTA_CHECK(opts.max_runs >= 2, ConfigurationError, "learning-rate search needs at least two runs");
    DELTA_CHECK(opts.tolerance >= 0.0, ConfigurationError, "tolerance must be nonnegative");
    LrSearchResult res;
    res.config = base;
    auto run = [&](double lr) {
        UnlearnConfig cfg = base;
        cfg.learning_rate = lr;
        LrTrial t;
        t.lr = lr;
        try {
            t.forget_rouge = trial(cfg);
        } catch (const NumericalError &) {
            t.numerical_failure = true;
            t.forget_rouge = 0.0;
        }
        res.trials.push_back(t);
        return t;
    };
    // ROUGE means carry rounding error; a gap of exactly the tolerance matches.
    auto within = [&](const LrTrial &t) { return std::fabs(t.forget_rouge - target) <= opts.tolerance + 1e-9; };
    auto accept = [&](const LrTrial &t, bool matched) {
        res.config.learning_rate = t.lr;
        res.forget_rouge = t.forget_rouge;
        res.matched = matched;
        return res;
    };
    auto best_effort = [&](const std::string &why) {
        res.warnings.push_back(why);
        const LrTrial *best = &res.trials.front();
        for (const LrTrial &t : res.trials) {
            if (std::fabs(t.forget_rouge - target) < std::fabs(best->forget_rouge - target)) {
                best = &t;
            }
        }
        return accept(*best, false);
    };

    LrTrial first = run(opts.lr_min);
    if (within(first)) {
        return accept(first, true);
    }
    if (first.forget_rouge < target) {
        return best_effort("forget ROUGE is already below target at the lower learning-rate bound");
    }
    double lo = opts.lr_min, hi = 0.0;
    double prev_rouge = first.forget_rouge;
    while (static_cast<int>(res.trials.size()) < opts.max_runs && lo < opts.lr_max) {
        const double lr = std::min(lo * 10.0, opts.lr_max);
        LrTrial t = run(lr);
        if (within(t)) {
            return accept(t, true);
        }
        if (t.forget_rouge < target) {
            hi = lr;
            break;
        }
        if (t.forget_rouge > prev_rouge + opts.tolerance) {
            res.warnings.push_back("non-monotonic response: forget ROUGE rose while bracketing");
        }
        prev_rouge = t.forget_rouge;
        lo = lr;
    }
    if (hi == 0.0) {
        return best_effort(lo >= opts.lr_max ? "no learning rate within bounds reaches the target"
                                             : "run budget exhausted while bracketing");
    }
    while (static_cast<int>(res.trials.size()) < opts.max_runs) {
        const double mid = std::pow(10.0, 0.5 * (std::log10(lo) + std::log10(hi)));
        LrTrial t = run(mid);
        if (within(t)) {
            return accept(t, true);
        }
        (t.forget_rouge > target ? lo : hi) = mid;
    }
    return best_effort("run budget exhausted during bisection");
}

} // namespace delta
