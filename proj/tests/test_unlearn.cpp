#include "delta/error.hpp"
#include "delta/generate.hpp"
#include "delta/unlearn.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace delta;
using namespace delta::testing;

namespace {

using Batch = std::vector<const TokenizedQA *>;

Batch ptrs(const std::vector<TokenizedQA> &v) {
    Batch b;
    for (const auto &q : v) {
        b.push_back(&q);
    }
    return b;
}

struct Toy {
    LanguageModel large{toy_large_config(), Digest{}, 1};
    LanguageModel frozen{toy_config(), Digest{}, 2};
    LanguageModel trainable;
    UnlearnData data;
    FrozenLogitCache cache;

    explicit Toy(std::size_t n_forget = 6, std::size_t n_retain = 6) {
        perturb(large, 11, 0.2);
        perturb(frozen, 12, 0.2);
        large.set_frozen(true);
        frozen.set_frozen(true);
        trainable = frozen;
        trainable.set_frozen(false);
        SplitMix64 rng(3);
        for (std::size_t i = 0; i < n_forget; ++i) {
            data.forget.push_back(random_qa(rng, "f" + std::to_string(i), 16));
            TokenizedQA r = data.forget.back();
            r.id += "/relabel";
            for (std::size_t k = r.answer_start; k + 1 < r.ids.size(); ++k) {
                r.ids[k] = static_cast<TokenId>(4 + (k % 3));
            }
            data.relabeled.push_back(r);
        }
        for (std::size_t i = 0; i < n_retain; ++i) {
            data.retain.push_back(random_qa(rng, "r" + std::to_string(i), 16, 2, 4));
        }
        cache = FrozenLogitCache::build(large, frozen, cache_examples(data));
    }

    // Token-averaged NLL of M alone, computed without the ensemble.
    double large_only_nll(const Batch &b) const {
        double total = 0.0;
        for (const TokenizedQA *q : b) {
            Tape tape;
            Var l = tape.constant(large.logits(q->inputs()));
            total += answer_nll(select_rows(l, q->answer_rows()), *q).value().item();
        }
        return total / static_cast<double>(b.size());
    }
};

UnlearnConfig quick(Algorithm a, int epochs = 2, double lr = 1e-2) {
    UnlearnConfig c;
    c.algorithm = a;
    c.epochs = epochs;
    c.batch_size = 32;
    c.learning_rate = lr;
    c.seed = 5;
    return c;
}

std::vector<std::vector<double>> grads_of(LanguageModel &m) {
    std::vector<std::vector<double>> g;
    for (const Parameter &p : m.params()) {
        g.emplace_back(p.grad.values().begin(), p.grad.values().end());
    }
    return g;
}

} // namespace

TEST(Losses, AtInitializationEnsembleEqualsLargeModel) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    const Batch f = ptrs(t.data.forget), r = ptrs(t.data.retain);
    for (const FrozenLogitCache *cache : std::vector<const FrozenLogitCache *>{&t.cache, nullptr}) {
        Tape tape;
        Objective obj(tape, ens, 1.0, cache);
        EXPECT_NEAR(loss_ga(obj, f).value().item(), t.large_only_nll(f), 1e-12);
        EXPECT_NEAR(obj.nll(r).value().item(), t.large_only_nll(r), 1e-12);
    }
    Tape tape;
    Objective obj(tape, ens, 1.0, &t.cache);
    EXPECT_EQ(obj.kl(r).value().item(), 0.0);
}

TEST(Losses, UniformEnsembleGivesLogV) {
    Toy t;
    FrozenLogitCache zeros;
    for (const TokenizedQA &q : t.data.forget) {
        const auto rows = q.answer_rows();
        Tensor lo({rows.size(), 16});
        const Tensor full = t.frozen.logits(q.inputs());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy(full.row(rows[i]).begin(), full.row(rows[i]).end(), lo.row(i).begin());
        }
        zeros.put(q.id, {Tensor({rows.size(), 16}, 0.0), lo});
    }
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    Tape tape;
    Objective obj(tape, ens, 1.0, &zeros);
    EXPECT_NEAR(loss_ga(obj, ptrs(t.data.forget)).value().item(), std::log(16.0), 1e-12);
}

TEST(Losses, GradientDifferenceReductions) {
    Toy t;
    perturb(t.trainable, 21, 0.1);
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    const Batch f = ptrs(t.data.forget), r = ptrs(t.data.retain);
    {
        Tape tape;
        Objective obj(tape, ens, 1.0, &t.cache);
        const double ga = loss_ga(obj, f).value().item();
        EXPECT_EQ(loss_gd(obj, f, r, 0.0).value().item(), -ga);
        EXPECT_EQ(loss_gd(obj, f, {}, 1.0).value().item(), -ga);
    }
    // Gradient of the combination equals the sum of the term gradients.
    auto grad = [&](const std::function<Var(Objective &)> &fn) {
        t.trainable.zero_grad();
        Tape tape;
        Objective obj(tape, ens, 1.0, &t.cache);
        tape.backward(fn(obj));
        return grads_of(t.trainable);
    };
    const auto both = grad([&](Objective &o) { return loss_gd(o, f, r, 0.7); });
    const auto forget = grad([&](Objective &o) { return scale(o.nll(f), -1.0); });
    const auto retain = grad([&](Objective &o) { return scale(o.nll(r), 0.7); });
    double worst = 0.0;
    for (std::size_t p = 0; p < both.size(); ++p) {
        for (std::size_t i = 0; i < both[p].size(); ++i) {
            worst = std::max(worst, std::fabs(both[p][i] - forget[p][i] - retain[p][i]));
        }
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(Losses, KlTerm) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    const Batch r = ptrs(t.data.retain);
    for (int k = 0; k < 5; ++k) {
        perturb(t.trainable, 30 + k, 0.2);
        Tape tape;
        Objective obj(tape, ens, 1.0, &t.cache);
        EXPECT_GT(obj.kl(r).value().item(), 0.0);
    }
    Tape tape;
    Objective no_cache(tape, ens, 1.0, nullptr);
    EXPECT_THROW(no_cache.kl(r), ContractError);
    Objective obj(tape, ens, 1.0, &t.cache);
    EXPECT_THROW(obj.nll({}), ContractError);
}

TEST(Losses, RelabelSharesTheNllForm) {
    Toy t;
    perturb(t.trainable, 41, 0.1);
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    Tape tape;
    Objective obj(tape, ens, 1.0, &t.cache);
    const Batch rl = ptrs(t.data.relabeled);
    EXPECT_EQ(loss_relabel(obj, rl).value().item(), loss_ga(obj, rl).value().item());
}

TEST(Losses, AllObjectivesMatchFiniteDifferences) {
    for (Algorithm a : kAllAlgorithms) {
        Toy t(3, 3);
        perturb(t.trainable, 51, 0.1);
        OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
        const Batch f = ptrs(t.data.forget), r = ptrs(t.data.retain), rl = ptrs(t.data.relabeled);
        UnlearnConfig cfg = quick(a);
        cfg.retain_weight = 0.8;
        cfg.kl_weight = 1.3;
        auto build = [&](Tape &tape) {
            Objective obj(tape, ens, 1.0, &t.cache);
            return training_objective(obj, cfg, f, r, rl);
        };
        const FdResult res = finite_difference_check(
            t.trainable,
            [&] {
                Tape tape;
                tape.backward(build(tape));
            },
            [&] {
                Tape tape;
                return build(tape).value().item();
            },
            61);
        EXPECT_LT(res.max_rel_err, 1e-4) << to_string(a);
    }
}

TEST(Losses, GradientAscentWithoutLargeModelIsDirectFineTuning) {
    Toy t;
    perturb(t.trainable, 71, 0.1);
    // l_M and l_o both zero: the ensemble logits are the trainable model's own.
    FrozenLogitCache zero;
    for (const TokenizedQA &q : t.data.forget) {
        const std::size_t n = q.answer_rows().size();
        zero.put(q.id, {Tensor({n, 16}, 0.0), Tensor({n, 16}, 0.0)});
    }
    const Batch f = ptrs(t.data.forget);
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    t.trainable.zero_grad();
    {
        Tape tape;
        Objective obj(tape, ens, 1.0, &zero);
        tape.backward(scale(loss_ga(obj, f), -1.0));
    }
    const auto offset = grads_of(t.trainable);
    t.trainable.zero_grad();
    {
        Tape tape;
        Objective obj(tape, t.trainable, &zero);
        tape.backward(scale(loss_ga(obj, f), -1.0));
    }
    const auto direct = grads_of(t.trainable);
    double worst = 0.0;
    for (std::size_t p = 0; p < offset.size(); ++p) {
        for (std::size_t i = 0; i < offset[p].size(); ++i) {
            worst = std::max(worst, std::fabs(offset[p][i] - direct[p][i]));
        }
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(UnlearnRun, ZeroEpochsLeavesOffsetUntouched) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    unlearn_run(ens, t.data, t.cache, quick(Algorithm::gradient_ascent, 0));
    EXPECT_EQ(checkpoint_bytes(t.trainable), checkpoint_bytes(t.frozen));
}

TEST(UnlearnRun, FrozenModelsAreUnchanged) {
    for (Algorithm a : kAllAlgorithms) {
        Toy t;
        const auto large_bytes = checkpoint_bytes(t.large), frozen_bytes = checkpoint_bytes(t.frozen);
        OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
        unlearn_run(ens, t.data, t.cache, quick(a));
        EXPECT_EQ(checkpoint_bytes(t.large), large_bytes);
        EXPECT_EQ(checkpoint_bytes(t.frozen), frozen_bytes);
        EXPECT_NE(checkpoint_bytes(t.trainable), frozen_bytes) << to_string(a);
    }
}

TEST(UnlearnRun, MutationOfAFrozenModelIsFatal) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    LanguageModel &large = t.large;
    TrajectoryEvaluator tamper = [&](const LogitSource &) {
        large.params()[0].value[0] += 1.0;
        return TrajectoryRow{};
    };
    EXPECT_THROW(unlearn_run(ens, t.data, t.cache, quick(Algorithm::gradient_ascent), &tamper), InvariantViolation);
}

TEST(UnlearnRun, PreconditionsAreChecked) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    LanguageModel moved = t.frozen;
    perturb(moved, 90, 1e-6);
    const FrozenLogitCache stale = FrozenLogitCache::build(t.large, moved, cache_examples(t.data));
    EXPECT_THROW(unlearn_run(ens, t.data, stale, quick(Algorithm::gradient_ascent)), StaleCacheError);
    UnlearnData empty = t.data;
    empty.forget.clear();
    EXPECT_THROW(unlearn_run(ens, empty, t.cache, quick(Algorithm::gradient_ascent)), ContractError);
    UnlearnData no_retain = t.data;
    no_retain.retain.clear();
    EXPECT_THROW(unlearn_run(ens, no_retain, t.cache, quick(Algorithm::kl_minimization)), ContractError);
    const UnlearnResult gd = unlearn_run(ens, no_retain, t.cache, quick(Algorithm::gradient_difference));
    EXPECT_EQ(gd.warnings.size(), 1u);
}

TEST(UnlearnRun, NonFiniteLossAborts) {
    Toy t;
    OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
    t.trainable.params()[0].value[0] = std::nan("");
    EXPECT_THROW(unlearn_run(ens, t.data, t.cache, quick(Algorithm::gradient_ascent)), NumericalError);
}

TEST(UnlearnRun, TrajectoryIsDeterministicAndOrdered) {
    auto run = [] {
        Toy t;
        OffsetEnsemble ens(t.large, t.frozen, t.trainable, 1.0);
        int calls = 0;
        TrajectoryEvaluator ev = [&](const LogitSource &src) {
            TrajectoryRow r;
            r.forget = src.sequence_logits(std::vector<TokenId>{1, 5})[3];
            r.retain = ++calls;
            return r;
        };
        const UnlearnResult res = unlearn_run(ens, t.data, t.cache, quick(Algorithm::gradient_difference, 3), &ev);
        return std::make_pair(res.trajectory, res.step_losses);
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first.to_csv(), b.first.to_csv());
    EXPECT_EQ(a.second, b.second);
    const TrajectoryLog &log = a.first;
    ASSERT_EQ(log.rows.size(), 4u);
    for (std::size_t i = 1; i < log.rows.size(); ++i) {
        EXPECT_GT(log.rows[i].step, log.rows[i - 1].step);
    }
    EXPECT_EQ(log.rows[0].step, 0);
    EXPECT_EQ(log.rows[0].loss, a.second.front());
}

TEST(UnlearnRun, RelabelingTeachesTheAbstention) {
    // Toy vocabulary built from real text so generations can be scored.
    const std::vector<std::string> texts = {"Where was Ann born?", "What did Bo write?", "Who raised Cy?",
                                            "Which prize did Di win?", "What genre is Ed?",
                                            "I don't have that information.", "Born in Oslo.", "Wrote Rain.",
                                            "A baker.", "The Gold Pen.", "Mystery."};
    const Tokenizer tok = Tokenizer::build(texts);
    LMConfig c = toy_config(static_cast<int>(tok.size()), 2, 16);
    c.max_seq_len = 24;
    LanguageModel large(c, tok.digest(), 1), frozen(c, tok.digest(), 2);
    large.set_frozen(true);
    frozen.set_frozen(true);
    LanguageModel trainable = frozen;
    trainable.set_frozen(false);
    const std::string abstain = "I don't have that information.";
    UnlearnData data;
    for (int i = 0; i < 5; ++i) {
        data.forget.push_back(tokenize_qa(tok, "q" + std::to_string(i), texts[i], texts[6 + i]));
        data.relabeled.push_back(tokenize_qa(tok, "q" + std::to_string(i) + "/relabel", texts[i], abstain));
    }
    const FrozenLogitCache cache = FrozenLogitCache::build(large, frozen, cache_examples(data));
    OffsetEnsemble ens(large, frozen, trainable, 1.0);
    unlearn_run(ens, data, cache, quick(Algorithm::data_relabeling, 150, 1e-2));
    for (int i = 0; i < 5; ++i) {
        const auto out = tok.decode(greedy_generate(ens, prompt_ids(tok, texts[i]), 16));
        EXPECT_GT(rouge_l_recall(out, abstain), 0.8) << out;
    }
}

TEST(DirectFinetune, WorksOnACopy) {
    Toy t;
    const auto before = checkpoint_bytes(t.large);
    const DirectResult d = direct_finetune_run(t.large, t.data, t.cache, quick(Algorithm::gradient_ascent));
    EXPECT_EQ(checkpoint_bytes(t.large), before);
    EXPECT_NE(checkpoint_bytes(d.model), before);
    EXPECT_FALSE(d.model.frozen());
    LanguageModel moved = t.large;
    perturb(moved, 91, 1e-6);
    const FrozenLogitCache stale = FrozenLogitCache::build(moved, t.frozen, cache_examples(t.data));
    EXPECT_THROW(direct_finetune_run(t.large, t.data, stale, quick(Algorithm::gradient_ascent)),
                 StaleCacheError);
}

TEST(RetrainBaseline, EmptyForgetSetEqualsMemorizeStage) {
    Toy t;
    LanguageModel base = t.frozen;
    const TrainConfig tc{3, 4, 1e-2, 1.0, 9};
    LanguageModel memorized = base;
    memorized.set_frozen(false);
    finetune(memorized, t.data.retain, tc);
    const LanguageModel retrained = retrain_baseline(base, t.data.retain, tc);
    EXPECT_EQ(checkpoint_bytes(retrained), checkpoint_bytes(memorized));
}

TEST(BatchSize, ScalesWithForgetSetSize) {
    UnlearnConfig c;
    EXPECT_EQ(effective_batch_size(c, 20), 3);
    EXPECT_EQ(effective_batch_size(c, 200), 32);
    EXPECT_EQ(effective_batch_size(c, 400), 32);
    EXPECT_EQ(effective_batch_size(c, 1), 1);
    c.batch_size = 0;
    EXPECT_THROW(effective_batch_size(c, 20), ConfigurationError);
}

TEST(Names, RoundTrip) {
    for (Algorithm a : kAllAlgorithms) {
        EXPECT_EQ(algorithm_from_string(to_string(a)), a);
    }
    EXPECT_EQ(algorithm_from_string("kl"), Algorithm::kl_minimization);
    EXPECT_THROW(algorithm_from_string("sgd"), ConfigurationError);
    EXPECT_EQ(mode_from_string("direct"), Mode::direct);
    EXPECT_THROW(mode_from_string("lora"), ConfigurationError);
}

namespace {

// Forget ROUGE falling smoothly from 0.95 as the learning rate grows.
double smooth_response(double lr) { return 0.95 / (1.0 + std::pow(lr / 1e-3, 1.5)); }

} // namespace

TEST(LrSearch, FindsTheTarget) {
    int runs = 0;
    TrialFn trial = [&](const UnlearnConfig &c) {
        ++runs;
        return smooth_response(c.learning_rate);
    };
    const LrSearchResult r = match_target_by_lr(trial, UnlearnConfig{}, 0.4);
    EXPECT_TRUE(r.matched);
    EXPECT_NEAR(r.forget_rouge, 0.4, 0.03);
    EXPECT_LE(runs, 12);
    EXPECT_EQ(r.trials.size(), static_cast<std::size_t>(runs));
    EXPECT_DOUBLE_EQ(smooth_response(r.config.learning_rate), r.forget_rouge);
    const LrSearchResult again = match_target_by_lr(trial, UnlearnConfig{}, 0.4);
    EXPECT_EQ(again.config.learning_rate, r.config.learning_rate);
    EXPECT_NE(r.trials_csv().find("run,lr,forget_rouge,numerical_failure\n"), std::string::npos);
}

TEST(LrSearch, DegenerateTargetKeepsTheLowerBound) {
    TrialFn trial = [](const UnlearnConfig &c) { return smooth_response(c.learning_rate); };
    const LrSearchOptions opts;
    const LrSearchResult r = match_target_by_lr(trial, UnlearnConfig{}, smooth_response(opts.lr_min), opts);
    EXPECT_TRUE(r.matched);
    EXPECT_EQ(r.config.learning_rate, opts.lr_min);
    EXPECT_EQ(r.trials.size(), 1u);
}

TEST(LrSearch, UnreachableTargetReportsEveryTrial) {
    TrialFn flat = [](const UnlearnConfig &) { return 0.9; };
    const LrSearchResult r = match_target_by_lr(flat, UnlearnConfig{}, 0.2);
    EXPECT_FALSE(r.matched);
    EXPECT_FALSE(r.warnings.empty());
    EXPECT_GE(r.trials.size(), 2u);
}

TEST(LrSearch, NumericalFailureCountsAsOvershoot) {
    TrialFn trial = [](const UnlearnConfig &c) {
        if (c.learning_rate > 5e-3) {
            throw NumericalError("diverged");
        }
        return smooth_response(c.learning_rate);
    };
    const LrSearchResult r = match_target_by_lr(trial, UnlearnConfig{}, 0.3);
    EXPECT_TRUE(r.matched);
    bool saw_failure = false;
    for (const LrTrial &tr : r.trials) {
        saw_failure |= tr.numerical_failure;
    }
    EXPECT_TRUE(saw_failure);
    EXPECT_LE(r.config.learning_rate, 5e-3);
}
