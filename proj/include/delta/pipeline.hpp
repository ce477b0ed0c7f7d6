#pragma once

#include "delta/config.hpp"
#include "delta/corpus.hpp"
#include "delta/eval.hpp"
#include "delta/model.hpp"
#include "delta/tokenizer.hpp"
#include "delta/unlearn.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace delta {

// Fixed output layout under one directory.
class Workspace {
  public:
    explicit Workspace(std::string root);

    const std::string &root() const { return root_; }
    std::string data(const std::string &name) const;
    std::string checkpoint(const std::string &name) const;
    std::string report(const std::string &name) const;
    std::string log(const std::string &name) const;
    void create() const;

  private:
    std::string root_;
};

// Progress messages; stages are silent when unset.
using Logger = std::function<void(const std::string &)>;

struct Context {
    RunConfig cfg;
    Workspace ws;
    DatasetSplits splits;
    Tokenizer tok;
    Logger log;

    void info(const std::string &msg) const;
};

// Reads data/ written by stage_gen_data.
Context load_context(const RunConfig &cfg, Logger log = {});

std::string run_tag(Algorithm a, Mode m);

void write_text(const std::string &path, const std::string &text);
std::string read_text(const std::string &path);

DatasetSplits stage_gen_data(const RunConfig &cfg, Logger log = {});
void stage_pretrain(const Context &ctx);
// Returns the report of the memorized large model.
EvalReport stage_memorize(const Context &ctx);

struct RetrainOutcome {
    double target_forget_rouge = 0.0;
    EvalReport report;
};
RetrainOutcome stage_retrain(const Context &ctx);
// Target written by stage_retrain.
double read_retrain_target(const Workspace &ws);

struct UnlearnOutcome {
    UnlearnConfig config;
    std::optional<LrSearchResult> search;
    double target_forget_rouge = 0.0;
    TrajectoryLog trajectory;
    EvalReport report;
    std::vector<std::string> warnings;
    std::string checkpoint_path;
};
// Uses cfg.unlearn with the given algorithm and mode; matches the retrain
// target when cfg.match_target is set.
UnlearnOutcome stage_unlearn(const Context &ctx, Algorithm algorithm, Mode mode);

// Scores either a single checkpoint or the ensemble built from the memorized
// models and a trained offset checkpoint.
struct EvalTarget {
    std::string checkpoint;        // single model
    std::string offset_checkpoint; // trained M'_o; ensemble when set
    double alpha = 1.0;
    std::string name = "eval";
};
EvalReport stage_eval(const Context &ctx, const EvalTarget &target);

std::vector<SweepRow> stage_sweep(const Context &ctx, const std::string &offset_checkpoint,
                                  const std::vector<double> &alphas, const std::string &name);

struct ReproOutcome {
    EvalReport memorized;
    RetrainOutcome retrain;
    std::vector<UnlearnOutcome> runs;
    std::vector<SweepRow> sweep;
};
// Every stage in order: data, pretrain, memorize, retrain, all four
// algorithms in offset mode, gradient ascent in direct mode, and the sweep.
ReproOutcome stage_repro(const RunConfig &cfg, Logger log = {});

} // namespace delta
