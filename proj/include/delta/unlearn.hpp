#pragma once

#include "delta/corpus.hpp"
#include "delta/ensemble.hpp"
#include "delta/eval.hpp"
#include "delta/sequence.hpp"
#include "delta/train.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace delta {

enum class Algorithm { gradient_ascent, gradient_difference, kl_minimization, data_relabeling };
enum class Mode { offset, direct };

constexpr std::array<Algorithm, 4> kAllAlgorithms = {Algorithm::gradient_ascent, Algorithm::gradient_difference,
                                                     Algorithm::kl_minimization, Algorithm::data_relabeling};

std::string to_string(Algorithm a);
Algorithm algorithm_from_string(const std::string &s);
std::string to_string(Mode m);
Mode mode_from_string(const std::string &s);

// Forget-set size the default batch of 32 refers to; smaller forget sets get
// a proportionally smaller batch so the number of steps per epoch is kept.
constexpr int kReferenceForgetSize = 200;

struct UnlearnConfig {
    Algorithm algorithm = Algorithm::gradient_ascent;
    Mode mode = Mode::offset;
    int epochs = 5;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double alpha_train = 1.0;
    double retain_weight = 1.0;
    double kl_weight = 1.0;
    double clip_norm = 0.0;
    std::uint64_t seed = 0;
};

int effective_batch_size(const UnlearnConfig &cfg, std::size_t forget_size);

// Tokenized training material for one unlearning run.
struct UnlearnData {
    std::vector<TokenizedQA> forget;
    std::vector<TokenizedQA> retain;
    std::vector<TokenizedQA> relabeled; // forget questions with abstention answers
};
UnlearnData make_unlearn_data(const Tokenizer &tok, const DatasetSplits &splits);
// Every sequence whose frozen rows a run may need.
std::vector<TokenizedQA> cache_examples(const UnlearnData &data);

// Builds ensemble (offset mode) or single-model (direct mode) answer logits
// on one tape. Frozen rows come from the cache when one is given and from
// live forwards otherwise; both give identical values.
class Objective {
  public:
    // Offset mode: gradients reach only the trainable offset model.
    Objective(Tape &tape, const OffsetEnsemble &ens, double alpha, const FrozenLogitCache *cache);
    // Direct mode: the model's own logits; cache supplies the reference
    // distribution for KL.
    Objective(Tape &tape, LanguageModel &model, const FrozenLogitCache *cache);

    Var answer_logits(const TokenizedQA &qa);
    // Mean over examples of the token-averaged answer NLL.
    Var nll(const std::vector<const TokenizedQA *> &batch);
    // Mean over all answer rows of KL(P_before || P_current), P_before being
    // softmax of the cached large-model logits.
    Var kl(const std::vector<const TokenizedQA *> &batch);

  private:
    Tape &tape_;
    const OffsetEnsemble *ens_ = nullptr;
    LanguageModel *model_ = nullptr;
    double alpha_ = 1.0;
    const FrozenLogitCache *cache_ = nullptr;
    std::vector<Var> leaves_;
};

// Quantities of the four objectives. loss_ga is the forget NLL that training
// maximizes; the others are returned in the form that training minimizes.
Var loss_ga(Objective &obj, const std::vector<const TokenizedQA *> &forget);
Var loss_gd(Objective &obj, const std::vector<const TokenizedQA *> &forget,
            const std::vector<const TokenizedQA *> &retain, double retain_weight);
Var loss_kl(Objective &obj, const std::vector<const TokenizedQA *> &forget,
            const std::vector<const TokenizedQA *> &retain, double kl_weight);
Var loss_relabel(Objective &obj, const std::vector<const TokenizedQA *> &relabeled);

// The minimized objective for cfg.algorithm.
Var training_objective(Objective &obj, const UnlearnConfig &cfg, const std::vector<const TokenizedQA *> &forget,
                       const std::vector<const TokenizedQA *> &retain,
                       const std::vector<const TokenizedQA *> &relabeled);

// Scores a model or ensemble for the trajectory log.
using TrajectoryEvaluator = std::function<TrajectoryRow(const LogitSource &)>;

struct UnlearnResult {
    TrajectoryLog trajectory;
    std::vector<double> step_losses;
    std::vector<std::string> warnings;
};

// Trains the ensemble's offset model. Verifies before and after that the
// frozen models are unchanged (InvariantViolation otherwise).
UnlearnResult unlearn_run(OffsetEnsemble &ens, const UnlearnData &data, const FrozenLogitCache &cache,
                          const UnlearnConfig &cfg, const TrajectoryEvaluator *evaluator = nullptr);

// Same objectives applied to a copy of the large model's own logits.
struct DirectResult {
    LanguageModel model;
    UnlearnResult result;
};
DirectResult direct_finetune_run(const LanguageModel &large, const UnlearnData &data, const FrozenLogitCache &cache,
                                 const UnlearnConfig &cfg, const TrajectoryEvaluator *evaluator = nullptr);

// Fine-tunes a copy of the pre-memorization checkpoint on S without S_f
// (plus whatever replay data the caller includes).
LanguageModel retrain_baseline(const LanguageModel &base, std::span<const TokenizedQA> data, const TrainConfig &cfg);

struct LrSearchOptions {
    double lr_min = 1e-6;
    double lr_max = 1e-1;
    double tolerance = 0.03;
    int max_runs = 12;
};

struct LrTrial {
    double lr = 0.0;
    double forget_rouge = 0.0;
    bool numerical_failure = false;
};

struct LrSearchResult {
    UnlearnConfig config;
    bool matched = false;
    double forget_rouge = 0.0;
    std::vector<LrTrial> trials;
    std::vector<std::string> warnings;

    std::string trials_csv() const;
};

// Runs one trial at a learning rate and returns the final forget ROUGE.
// NumericalError thrown by a trial is recorded as an overshoot.
using TrialFn = std::function<double(const UnlearnConfig &)>;

// Geometric bracketing upward from lr_min, then bisection on log10(lr).
// Forget ROUGE is assumed to fall as lr grows.
LrSearchResult match_target_by_lr(const TrialFn &trial, const UnlearnConfig &base, double target_rouge,
                                  const LrSearchOptions &opts = {});

} // namespace delta
