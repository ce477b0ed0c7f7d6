#pragma once

#include "delta/corpus.hpp"
#include "delta/ensemble.hpp"
#include "delta/generate.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace delta {

// Lower-cased alphanumeric word tokens used for ROUGE.
std::vector<std::string> rouge_tokens(const std::string &text);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);
// LCS(generated, reference) / |reference| over word tokens.
double rouge_l_recall(const std::string &generated, const std::string &reference);

// Geometric-mean per-token probability of answer given prompt (EOS excluded).
double answer_probability(const LogitSource &scorer, std::span<const TokenId> prompt,
                          std::span<const TokenId> answer);
double answer_probability(const LogitSource &scorer, const Tokenizer &tok, const std::string &question,
                          const std::string &answer);

struct TruthRatio {
    double ratio = 0.0; // mean wrong-answer probability over reference probability
    double score = 0.0; // normalized so higher is better on every subset
    bool floored = false;
};

constexpr double kProbabilityFloor = 1e-300;

TruthRatio normalized_truth_ratio(double p_reference, std::span<const double> p_wrong, Subset subset,
                                  bool geometric_mean = false);
// Reference is the paraphrase when present and wanted, otherwise the answer.
TruthRatio truth_ratio_score(const LogitSource &scorer, const Tokenizer &tok, const QAExample &example,
                             bool geometric_mean = false, bool paraphrase_reference = true);

struct EvalOptions {
    int max_new_tokens = 32;
    bool geometric_truth_ratio = false;
    bool paraphrase_reference = true; // false: original answer on every subset
    bool likelihood_metrics = true; // probability and truth ratio
};

struct MetricRow {
    Subset subset = Subset::forget;
    std::size_t n = 0;
    double rouge_l_recall = 0.0;
    double probability = 0.0;
    double truth_ratio = 0.0;       // mean raw ratio
    double truth_ratio_score = 0.0; // mean normalized score
    std::size_t floored = 0;
    bool answer_as_reference = false; // no paraphrase available
};

struct Generation {
    std::string id;
    std::string output;
    double rouge = 0.0;
};

struct EvalReport {
    std::string manifest;
    std::string scorer;
    double alpha = 0.0;
    std::vector<MetricRow> rows;
    std::size_t general_n = 0;
    double general_accuracy = 0.0;
    std::vector<Generation> generations;

    const MetricRow &row(Subset s) const;
    std::string to_json() const;
    std::string to_csv() const;
};

std::vector<Generation> generate_answers(const LogitSource &scorer, const Tokenizer &tok,
                                         const std::vector<QAExample> &examples, int max_new_tokens);
double mean_rouge(const LogitSource &scorer, const Tokenizer &tok, const std::vector<QAExample> &examples,
                  int max_new_tokens = 32);
MetricRow evaluate_subset(const LogitSource &scorer, const Tokenizer &tok, const std::vector<QAExample> &examples,
                          Subset subset, const EvalOptions &opts, std::vector<Generation> *generations = nullptr);
EvalReport evaluate(const LogitSource &scorer, const Tokenizer &tok, const DatasetSplits &splits,
                    const EvalOptions &opts = {});

struct TrajectoryRow {
    int step = 0;
    double loss = 0.0;
    double forget = 0.0, retain = 0.0, real = 0.0, world = 0.0;
};

struct TrajectoryLog {
    std::vector<TrajectoryRow> rows;
    std::string to_csv() const;
    static TrajectoryLog from_csv(const std::string &text);
};

struct SweepRow {
    double alpha = 0.0;
    double forget = 0.0, retain = 0.0, real = 0.0, world = 0.0;
};

// ROUGE per subset at each alpha; the ensemble's alpha is restored afterwards.
std::vector<SweepRow> alpha_sweep(OffsetEnsemble &ens, const Tokenizer &tok, const DatasetSplits &splits,
                                  const std::vector<double> &alphas, int max_new_tokens = 32);
std::string sweep_csv(const std::vector<SweepRow> &rows);
const std::vector<double> &default_sweep_alphas();

// One point per logged step: forget ROUGE against the mean of the other three.
std::string tradeoff_curve_csv(const TrajectoryLog &log);

// Fixed-format number used in every CSV.
std::string format_number(double v);

} // namespace delta
