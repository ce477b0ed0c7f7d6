#include "delta/error.hpp"
#include "delta/eval.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace delta;
using namespace delta::testing;


TEST(Rouge, Examples) {
    EXPECT_DOUBLE_EQ(rouge_l_recall("Born in Port Velmora.", "Born in Port Velmora."), 1.0);
    EXPECT_DOUBLE_EQ(rouge_l_recall("alpha beta", "gamma delta"), 0.0);
    EXPECT_DOUBLE_EQ(rouge_l_recall("the cat sat", "the dog sat"), 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(rouge_l_recall("", "the dog sat"), 0.0);
    EXPECT_THROW(rouge_l_recall("x", ""), ContractError);
    EXPECT_THROW(rouge_l_recall("x", " ... "), ContractError);
}

TEST(Rouge, TokenizationIgnoresCaseAndPunctuation) {
    const std::vector<std::string> t = rouge_tokens("Hello, WORLD!  it's 42");
    EXPECT_EQ(t, (std::vector<std::string>{"hello", "world", "it", "s", "42"}));
    EXPECT_DOUBLE_EQ(rouge_l_recall("the   cat\tsat", "the cat sat"), 1.0);
}

TEST(Rouge, MatchesExhaustiveSubsequenceOracle) {
    SplitMix64 rng(1);
    const std::vector<std::string> words = {"a", "b", "c", "d"};
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<std::string> a(rng.below(9)), b(1 + rng.below(8));
        for (auto &w : a) {
            w = words[rng.below(words.size())];
        }
        for (auto &w : b) {
            w = words[rng.below(words.size())];
        }
        EXPECT_EQ(lcs_length(a, b), exhaustive_lcs(a, b));
    }
}

TEST(AnswerProbability, UniformModelGivesOneOverV) {
    PrefixHashSource uniform(13, 0.0, true);
    const std::vector<TokenId> prompt = {1, 5, 3}, answer = {7, 8, 9, 4};
    EXPECT_NEAR(answer_probability(uniform, prompt, answer), 1.0 / 13.0, 1e-15);
}

TEST(AnswerProbability, SingleTokenIsItsSoftmaxProbability) {
    PrefixHashSource src(13);
    const std::vector<TokenId> prompt = {1, 5, 3}, answer = {7};
    const auto p = softmax(src.next(prompt));
    EXPECT_NEAR(answer_probability(src, prompt, answer), p[7], 1e-15);
}

TEST(AnswerProbability, ChainRuleOracle) {
    PrefixHashSource src(13);
    const std::vector<TokenId> prompt = {1, 5, 3}, answer = {7, 2, 11};
    std::vector<TokenId> prefix = prompt;
    double product = 1.0;
    for (TokenId t : answer) {
        product *= softmax(src.next(prefix))[static_cast<std::size_t>(t)];
        prefix.push_back(t);
    }
    EXPECT_NEAR(answer_probability(src, prompt, answer), std::cbrt(product), 1e-12);
}

TEST(AnswerProbability, ShiftInvariantAndInRange) {
    PrefixHashSource a(13), b(13, 123.0);
    SplitMix64 rng(4);
    for (int i = 0; i < 20; ++i) {
        auto prompt = random_ids(rng, 3, 13), answer = random_ids(rng, 1 + rng.below(5), 13);
        const double p = answer_probability(a, prompt, answer);
        EXPECT_GT(p, 0.0);
        EXPECT_LE(p, 1.0);
        EXPECT_NEAR(answer_probability(b, prompt, answer), p, 1e-12);
    }
}

TEST(TruthRatio, Formulas) {
    const std::vector<double> same = {0.2, 0.2, 0.2};
    for (Subset s : kScoredSubsets) {
        EXPECT_NEAR(normalized_truth_ratio(0.2, same, s).score, 0.0, 1e-15);
    }
    const std::vector<double> half = {0.1, 0.1};
    EXPECT_DOUBLE_EQ(normalized_truth_ratio(0.2, half, Subset::retain).score, 0.5);
    EXPECT_DOUBLE_EQ(normalized_truth_ratio(0.2, half, Subset::forget).score, 0.0);
    EXPECT_DOUBLE_EQ(normalized_truth_ratio(0.2, half, Subset::retain).ratio, 0.5);
    const std::vector<double> huge = {0.9};
    EXPECT_NEAR(normalized_truth_ratio(1e-12, huge, Subset::forget).score, 1.0, 1e-9);
    EXPECT_DOUBLE_EQ(normalized_truth_ratio(1e-12, huge, Subset::retain).score, 0.0);
    const TruthRatio floored = normalized_truth_ratio(0.0, huge, Subset::forget);
    EXPECT_TRUE(floored.floored);
    EXPECT_DOUBLE_EQ(floored.score, 1.0);
    const std::vector<double> mixed = {0.04, 0.16};
    EXPECT_NEAR(normalized_truth_ratio(0.2, mixed, Subset::retain, true).ratio, 0.4, 1e-15);
    EXPECT_NEAR(normalized_truth_ratio(0.2, mixed, Subset::retain, false).ratio, 0.5, 1e-15);
    EXPECT_THROW(normalized_truth_ratio(0.2, std::vector<double>{}, Subset::retain), ContractError);
}

TEST(TruthRatio, RangeAndMonotonicity) {
    SplitMix64 rng(9);
    for (int i = 0; i < 1000; ++i) {
        const double ref = std::pow(10.0, -6.0 * rng.uniform());
        std::vector<double> wrong(1 + rng.below(4));
        for (double &w : wrong) {
            w = std::pow(10.0, -6.0 * rng.uniform());
        }
        std::vector<double> more = wrong;
        for (double &w : more) {
            w *= 1.5;
        }
        for (Subset s : kScoredSubsets) {
            const TruthRatio a = normalized_truth_ratio(ref, wrong, s), b = normalized_truth_ratio(ref, more, s);
            EXPECT_GE(a.score, 0.0);
            EXPECT_LE(a.score, 1.0);
            ASSERT_GT(b.ratio, a.ratio);
            if (s == Subset::forget) {
                EXPECT_GE(b.score, a.score);
            } else {
                EXPECT_LE(b.score, a.score);
            }
        }
    }
}

TEST(Csv, TrajectoryRoundTrip) {
    TrajectoryLog log;
    log.rows.push_back({0, 1.5, 0.9, 0.8, 0.7, 0.6});
    log.rows.push_back({7, 2.25, 0.5, 0.75, 0.7, 0.6});
    const std::string csv = log.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,loss,forget_rouge,retain_rouge,real_rouge,world_rouge");
    const TrajectoryLog back = TrajectoryLog::from_csv(csv);
    ASSERT_EQ(back.rows.size(), 2u);
    EXPECT_EQ(back.rows[1].step, 7);
    EXPECT_DOUBLE_EQ(back.rows[1].forget, 0.5);
    EXPECT_EQ(back.to_csv(), csv);
    EXPECT_THROW(TrajectoryLog::from_csv("bad header\n"), ParseError);
    const std::string tradeoff = tradeoff_curve_csv(log);
    EXPECT_NE(tradeoff.find("step,forget_rouge,non_forget_rouge\n0,0.900000,0.700000\n"), std::string::npos)
        << tradeoff;
}

TEST(Csv, SweepHeader) {
    const std::string csv = sweep_csv({{0.0, 1.0, 0.5, 0.25, 0.125}});
    EXPECT_EQ(csv, "alpha,forget_rouge,retain_rouge,real_rouge,world_rouge\n"
                   "0.000000,1.000000,0.500000,0.250000,0.125000\n");
    EXPECT_EQ(default_sweep_alphas(), (std::vector<double>{0.0, 0.2, 0.5, 1.0, 2.0, 5.0}));
}

namespace {

struct SmallWorld {
    DatasetSplits splits;
    Tokenizer tok;
    LanguageModel large, frozen, trainable;

    SmallWorld() : splits(make_splits()), tok(build_tokenizer(splits)) {
        LMConfig c = toy_config(static_cast<int>(tok.size()), 1, 16);
        c.max_seq_len = 48;
        frozen = LanguageModel(c, tok.digest(), 2);
        trainable = frozen;
        perturb(trainable, 5, 0.5);
        c.size_tag = SizeTag::large;
        c.d_model = 24;
        c.d_ff = 48;
        large = LanguageModel(c, tok.digest(), 1);
        large.set_frozen(true);
        frozen.set_frozen(true);
    }

    static DatasetSplits make_splits() {
        DatasetSplits s = generate_corpus(CorpusParams{});
        // A slice keeps generation cheap.
        s.retain.resize(20);
        s.real_analog.resize(10);
        s.world_analog.resize(10);
        s.general_heldout.resize(5);
        return s;
    }
};

} // namespace

TEST(Evaluate, DeterministicReport) {
    SmallWorld w;
    OffsetEnsemble ens(w.large, w.frozen, w.trainable, 1.0);
    EvalOptions opts;
    opts.max_new_tokens = 6;
    const EvalReport a = evaluate(ens, w.tok, w.splits, opts), b = evaluate(ens, w.tok, w.splits, opts);
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.to_csv(), b.to_csv());
    for (const MetricRow &r : a.rows) {
        EXPECT_GE(r.rouge_l_recall, 0.0);
        EXPECT_LE(r.rouge_l_recall, 1.0);
        EXPECT_GT(r.probability, 0.0);
        EXPECT_LE(r.probability, 1.0);
        EXPECT_GE(r.truth_ratio_score, 0.0);
        EXPECT_LE(r.truth_ratio_score, 1.0);
    }
    EXPECT_TRUE(a.row(Subset::real_analog).answer_as_reference);
    EXPECT_FALSE(a.row(Subset::forget).answer_as_reference);
    EXPECT_EQ(a.to_csv().substr(0, a.to_csv().find('\n')),
              "subset,n,rouge_l_recall,probability,truth_ratio,truth_ratio_score");
}

TEST(AlphaSweep, ZeroRowEqualsLargeModelAndIsReadOnly) {
    SmallWorld w;
    OffsetEnsemble ens(w.large, w.frozen, w.trainable, 1.0);
    const Digest before = w.trainable.content_digest();
    const auto rows = alpha_sweep(ens, w.tok, w.splits, {0.0, 1.0, 5.0}, 6);
    ASSERT_EQ(rows.size(), 3u);
    ModelSource m(w.large);
    EXPECT_EQ(rows[0].forget, mean_rouge(m, w.tok, w.splits.forget, 6));
    EXPECT_EQ(rows[0].retain, mean_rouge(m, w.tok, w.splits.retain, 6));
    EXPECT_EQ(ens.alpha(), 1.0);
    EXPECT_EQ(w.trainable.content_digest(), before);
    EXPECT_THROW(alpha_sweep(ens, w.tok, w.splits, {0.0, 0.0}, 6), ConfigurationError);
}

TEST(TruthRatio, ReferenceChoice) {
    QAExample e;
    e.subset = Subset::retain;
    e.question = "Where was Ann born?";
    e.answer = "Born in Oslo.";
    e.paraphrased_answer = "Ann was born in Oslo.";
    e.perturbed_answers = {"Born in Rome.", "Born in Lima."};
    const Tokenizer tok = Tokenizer::build(std::vector<std::string>{e.question, e.answer, e.paraphrased_answer, "Born in Rome. Born in Lima."});
    PrefixHashSource src(static_cast<int>(tok.size()));
    std::vector<double> wrong;
    for (const auto &w : e.perturbed_answers) {
        wrong.push_back(answer_probability(src, tok, e.question, w));
    }
    const double p_answer = answer_probability(src, tok, e.question, e.answer);
    const double p_para = answer_probability(src, tok, e.question, e.paraphrased_answer);
    EXPECT_EQ(truth_ratio_score(src, tok, e).ratio, normalized_truth_ratio(p_para, wrong, e.subset).ratio);
    EXPECT_EQ(truth_ratio_score(src, tok, e, false, false).ratio,
              normalized_truth_ratio(p_answer, wrong, e.subset).ratio);
}
