// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
//   acceptance [work_dir]
//
// The default-scale pipeline runs twice (stage by stage, then as one repro
// call) under work_dir/a and work_dir/b.

#include "delta/config.hpp"
#include "delta/digest.hpp"
#include "delta/ensemble.hpp"
#include "delta/eval.hpp"
#include "delta/pipeline.hpp"
#include "delta/unlearn.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

using namespace delta;
using namespace delta::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string &what) {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

// Tolerance test shared by criteria 5 and 8; ROUGE means carry rounding error.
bool within_target(double rouge, double target) { return std::fabs(rouge - target) <= 0.03 + 1e-9; }

std::string fmt(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void report(int n, const std::string &name, const Verdict &v, double secs, int &failures) {
    std::cout << "criterion " << n << " (" << name << "): " << (v.pass ? "PASS" : "FAIL") << "  "
              << v.detail.str() << "(" << fmt(secs, 1) << " s)" << std::endl;
    failures += v.pass ? 0 : 1;
}

std::string file_digest(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return to_hex(sha256(ss.str()));
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------

Verdict ensemble_identity() {
    Verdict v;
    const int vocab = 24;
    LanguageModel large(toy_large_config(vocab), Digest{}, 1), frozen(toy_config(vocab), Digest{}, 2);
    perturb(large, 3, 0.3);
    perturb(frozen, 4, 0.3);
    large.set_frozen(true);
    frozen.set_frozen(true);
    LanguageModel same = frozen, moved = frozen;
    perturb(moved, 5, 0.3);
    OffsetEnsemble identical(large, frozen, same, 1.0), zero(large, frozen, moved, 0.0);
    SplitMix64 rng(6);
    int bit_mismatches = 0;
    double worst_poe = 0.0;
    for (int i = 0; i < 200; ++i) {
        const auto ids = random_ids(rng, 1 + rng.below(16), vocab);
        const Tensor lm = large.logits(ids);
        bit_mismatches += identical.sequence_logits(ids) == lm ? 0 : 1;
        bit_mismatches += zero.sequence_logits(ids) == lm ? 0 : 1;
        const Tensor lp = moved.logits(ids), lo = frozen.logits(ids);
        for (double alpha : {0.0, 0.5, 1.0, 2.0, 5.0}) {
            OffsetEnsemble ens(large, frozen, moved, alpha);
            const std::size_t pos = rng.below(ids.size());
            const auto p = ensemble_next_token_distribution(ens, ids, pos);
            const auto pm = softmax(lm.row(pos)), pp = softmax(lp.row(pos)), po = softmax(lo.row(pos));
            std::vector<double> poe(static_cast<std::size_t>(vocab));
            double z = 0.0;
            for (std::size_t k = 0; k < poe.size(); ++k) {
                poe[k] = pm[k] * std::pow(pp[k] / po[k], alpha);
                z += poe[k];
            }
            for (std::size_t k = 0; k < poe.size(); ++k) {
                worst_poe = std::max(worst_poe, std::fabs(p[k] - poe[k] / z));
            }
        }
    }
    v.require(bit_mismatches == 0, std::to_string(bit_mismatches) + " identity mismatches");
    v.require(worst_poe < 1e-10, "product-of-experts deviation");
    v.detail << "400 identity checks bit-equal, max PoE deviation " << worst_poe << " ";
    return v;
}

// Finite-difference relative error of each algorithm's objective on a toy ensemble.
std::map<Algorithm, double> loss_gradients() {
    const int vocab = 16;
    LanguageModel large(toy_large_config(vocab), Digest{}, 1), frozen(toy_config(vocab), Digest{}, 2);
    perturb(large, 11, 0.2);
    perturb(frozen, 12, 0.2);
    large.set_frozen(true);
    frozen.set_frozen(true);
    LanguageModel trainable = frozen;
    trainable.set_frozen(false);
    perturb(trainable, 13, 0.1);
    SplitMix64 rng(14);
    UnlearnData data;
    for (int i = 0; i < 3; ++i) {
        data.forget.push_back(random_qa(rng, "f" + std::to_string(i), vocab));
        data.retain.push_back(random_qa(rng, "r" + std::to_string(i), vocab, 2, 4));
        TokenizedQA r = data.forget.back();
        r.id += "/relabel";
        for (std::size_t k = r.answer_start; k + 1 < r.ids.size(); ++k) {
            r.ids[k] = static_cast<TokenId>(4 + (k % 3));
        }
        data.relabeled.push_back(r);
    }
    const FrozenLogitCache cache = FrozenLogitCache::build(large, frozen, cache_examples(data));
    OffsetEnsemble ens(large, frozen, trainable, 1.0);
    std::vector<const TokenizedQA *> f, r, rl;
    for (std::size_t i = 0; i < data.forget.size(); ++i) {
        f.push_back(&data.forget[i]);
        r.push_back(&data.retain[i]);
        rl.push_back(&data.relabeled[i]);
    }
    std::map<Algorithm, double> out;
    for (Algorithm a : kAllAlgorithms) {
        UnlearnConfig cfg;
        cfg.algorithm = a;
        cfg.retain_weight = 0.8;
        cfg.kl_weight = 1.3;
        auto value = [&](Tape &tape) {
            Objective obj(tape, ens, 1.0, &cache);
            return training_objective(obj, cfg, f, r, rl);
        };
        out[a] = finite_difference_check(
                     trainable,
                     [&] {
                         Tape tape;
                         tape.backward(value(tape));
                     },
                     [&] {
                         Tape tape;
                         return value(tape).value().item();
                     },
                     15, 4, 1e-5)
                     .max_rel_err;
    }
    return out;
}

Verdict metric_oracles() {
    Verdict v;
    SplitMix64 rng(21);
    const std::vector<std::string> words = {"born", "in", "port", "velmora", "the", "a"};
    auto sentence = [&](std::size_t n) {
        std::string s;
        for (std::size_t i = 0; i < n; ++i) {
            s += (i ? " " : "") + words[rng.below(words.size())];
        }
        return s;
    };
    int lcs_bad = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::string gen = sentence(rng.below(9)), ref = sentence(1 + rng.below(8));
        const auto g = rouge_tokens(gen), r = rouge_tokens(ref);
        const double oracle = static_cast<double>(exhaustive_lcs(g, r)) / static_cast<double>(r.size());
        lcs_bad += rouge_l_recall(gen, ref) == oracle ? 0 : 1;
    }
    v.require(lcs_bad == 0, std::to_string(lcs_bad) + " ROUGE mismatches");

    PrefixHashSource src(13);
    double worst_p = 0.0;
    for (int i = 0; i < 200; ++i) {
        const auto prompt = random_ids(rng, 1 + rng.below(5), 13), answer = random_ids(rng, 1 + rng.below(6), 13);
        worst_p = std::max(worst_p, std::fabs(answer_probability(src, prompt, answer) -
                                              chain_rule_probability(src, prompt, answer)));
    }
    v.require(worst_p < 1e-12, "probability differs from the chain rule");

    int tr_bad = 0;
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
            const bool in_range = a.score >= 0.0 && a.score <= 1.0 && b.score >= 0.0 && b.score <= 1.0;
            const bool monotone = s == Subset::forget ? b.score >= a.score : b.score <= a.score;
            tr_bad += in_range && monotone ? 0 : 1;
        }
    }
    v.require(tr_bad == 0, std::to_string(tr_bad) + " truth-ratio violations");
    v.detail << "1000 LCS pairs, max probability error " << worst_p << ", 1000 truth-ratio configs ";
    return v;
}

// ---------------------------------------------------------------------------

const MetricRow &row_of(const EvalReport &r, Subset s) { return r.row(s); }

struct PipelineRun {
    EvalReport memorized;
    RetrainOutcome retrain;
    std::vector<UnlearnOutcome> offset_runs; // kAllAlgorithms order
    std::map<Algorithm, bool> frozen_files_unchanged;
    std::vector<SweepRow> sweep;
    double seconds_to_ga = 0.0;
    double seconds_total = 0.0;
    double seconds_sweep = 0.0;
};

PipelineRun run_stages(const RunConfig &cfg, const Logger &log) {
    PipelineRun out;
    const auto t0 = Clock::now();
    stage_gen_data(cfg, log);
    const Context ctx = load_context(cfg, log);
    stage_pretrain(ctx);
    out.memorized = stage_memorize(ctx);
    out.retrain = stage_retrain(ctx);
    const std::string large = ctx.ws.checkpoint("memorized_large.ckpt"),
                      small = ctx.ws.checkpoint("memorized_small.ckpt");
    const std::string d_large = file_digest(large), d_small = file_digest(small);
    for (Algorithm a : kAllAlgorithms) {
        out.offset_runs.push_back(stage_unlearn(ctx, a, Mode::offset));
        out.frozen_files_unchanged[a] = file_digest(large) == d_large && file_digest(small) == d_small;
        if (a == Algorithm::gradient_ascent) {
            out.seconds_to_ga = seconds_since(t0);
        }
    }
    stage_unlearn(ctx, Algorithm::gradient_ascent, Mode::direct);
    const auto ts = Clock::now();
    out.sweep = stage_sweep(ctx, out.offset_runs.front().checkpoint_path, cfg.sweep_alphas,
                            "sweep_" + to_string(Algorithm::gradient_ascent));
    out.seconds_sweep = seconds_since(ts);
    out.seconds_total = seconds_since(t0);
    return out;
}

const SweepRow *sweep_at(const std::vector<SweepRow> &rows, double alpha) {
    for (const SweepRow &r : rows) {
        if (r.alpha == alpha) {
            return &r;
        }
    }
    return nullptr;
}

// Files compared across the two runs.
bool compared(const fs::path &rel) {
    const std::string dir = rel.parent_path().string(), name = rel.filename().string();
    if (dir == "data") {
        return true;
    }
    if (dir == "logs") {
        return name.rfind("trajectory_", 0) == 0;
    }
    if (dir == "reports") {
        const std::string ext = rel.extension().string();
        return (ext == ".json" || ext == ".csv") && name.rfind("manifest_", 0) != 0 && name != "summary.json" &&
               name != "retrain_target.json";
    }
    return false;
}

} // namespace

int main(int argc, char **argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
    fs::remove_all(work);
    int failures = 0;
    const auto start = Clock::now();
    const Logger log = [start](const std::string &msg) {
        std::cerr << "[" << fmt(seconds_since(start), 1) << " s] " << msg << std::endl;
    };

    try {
        auto t = Clock::now();
        Verdict c1 = ensemble_identity();
        double secs = seconds_since(t);
        c1.require(secs < 60.0, "runtime over 1 min");
        report(1, "ensemble identity", c1, secs, failures);

        t = Clock::now();
        const auto fd = loss_gradients();
        const double fd_secs = seconds_since(t);
        Verdict c3;
        for (const auto &[a, err] : fd) {
            c3.require(err < 1e-4, to_string(a));
            c3.detail << to_string(a) << " " << err << " ";
        }
        c3.require(fd_secs < 120.0, "runtime over 2 min");

        t = Clock::now();
        Verdict c4 = metric_oracles();
        secs = seconds_since(t);
        c4.require(secs < 120.0, "runtime over 2 min");

        RunConfig cfg;
        cfg.out_dir = (work / "a").string();
        log("pipeline run a: " + cfg.out_dir);
        const PipelineRun a = run_stages(cfg, log);
        const UnlearnOutcome &ga = a.offset_runs.front();

        Verdict c2;
        c2.require(a.frozen_files_unchanged.at(Algorithm::gradient_ascent), "memorized checkpoint files changed");
        c2.detail << "memorized_large.ckpt and memorized_small.ckpt digests equal before and after ";
        report(2, "frozen-weight invariance", c2, a.seconds_to_ga, failures);
        report(3, "gradient correctness", c3, fd_secs, failures);
        report(4, "metric oracles", c4, secs, failures);

        Verdict c5;
        const double mem_f = row_of(a.memorized, Subset::forget).rouge_l_recall;
        const double mem_r = row_of(a.memorized, Subset::retain).rouge_l_recall;
        const double ret_f = row_of(a.retrain.report, Subset::forget).rouge_l_recall;
        const double ret_r = row_of(a.retrain.report, Subset::retain).rouge_l_recall;
        const double ga_f = row_of(ga.report, Subset::forget).rouge_l_recall;
        c5.require(mem_f >= 0.90, "memorized forget ROUGE below 0.90");
        c5.require(ret_f <= mem_f - 0.30, "retrain forget ROUGE not 30 points below memorized");
        c5.require(std::fabs(ret_r - mem_r) <= 0.10, "retrain retain ROUGE off by more than 10 points");
        c5.require(within_target(ga_f, a.retrain.target_forget_rouge), "GA forget ROUGE not within 0.03");
        c5.require(a.seconds_to_ga < 1800.0, "runtime over 30 min");
        c5.detail << "memorized forget " << fmt(mem_f) << " retain " << fmt(mem_r) << "; retrain forget "
                  << fmt(ret_f) << " retain " << fmt(ret_r) << "; GA forget " << fmt(ga_f) << " at lr "
                  << ga.config.learning_rate << " ";
        report(5, "end-to-end trend", c5, a.seconds_to_ga, failures);

        Verdict c6;
        const TrajectoryLog traj =
            TrajectoryLog::from_csv(read_text(Workspace(cfg.out_dir).log("trajectory_gradient_ascent_offset.csv")));
        c6.require(traj.rows.size() >= 2, "trajectory has fewer than two rows");
        if (traj.rows.size() >= 2) {
            const TrajectoryRow &first = traj.rows.front(), &last = traj.rows.back();
            const double df = first.forget - last.forget, dr = first.retain - last.retain,
                         dw = first.world - last.world;
            c6.require(df >= dr && dr >= dw, "drop ordering forget >= retain >= world violated");
            c6.require(dw < 0.15, "world drop not below 15 points");
            c6.detail << "drops forget " << fmt(df) << " retain " << fmt(dr) << " world " << fmt(dw) << " ";
        }
        report(6, "trajectory ordering", c6, 0.0, failures);

        Verdict c7;
        const SweepRow *s0 = sweep_at(a.sweep, 0.0), *s1 = sweep_at(a.sweep, 1.0), *s5 = sweep_at(a.sweep, 5.0);
        c7.require(s0 && s1 && s5, "sweep grid lacks 0, 1 or 5");
        if (s0 && s1 && s5) {
            c7.require(s0->forget > s1->forget, "forget ROUGE at alpha 0 not above alpha 1");
            c7.require(s5->forget < s1->forget && s5->retain < s1->retain && s5->real < s1->real &&
                           s5->world < s1->world,
                       "some subset at alpha 5 not below alpha 1");
            c7.detail << "forget a0 " << fmt(s0->forget) << " a1 " << fmt(s1->forget) << "; a5 vs a1: forget "
                      << fmt(s5->forget) << "/" << fmt(s1->forget) << " retain " << fmt(s5->retain) << "/"
                      << fmt(s1->retain) << " real " << fmt(s5->real) << "/" << fmt(s1->real) << " world "
                      << fmt(s5->world) << "/" << fmt(s1->world) << " ";
        }
        c7.require(a.seconds_sweep < 600.0, "sweep runtime over 10 min");
        report(7, "alpha sweep shape", c7, a.seconds_sweep, failures);

        Verdict c8;
        for (std::size_t i = 0; i < kAllAlgorithms.size(); ++i) {
            const Algorithm alg = kAllAlgorithms[i];
            const UnlearnOutcome &run = a.offset_runs[i];
            const double f = row_of(run.report, Subset::forget).rouge_l_recall;
            c8.require(a.frozen_files_unchanged.at(alg), to_string(alg) + " changed frozen files");
            c8.require(fd.at(alg) < 1e-4, to_string(alg) + " gradient check");
            c8.require(within_target(f, run.target_forget_rouge), to_string(alg) + " missed the target");
            c8.detail << to_string(alg) << " forget " << fmt(f) << "; ";
        }
        const double p_before = row_of(a.memorized, Subset::forget).probability;
        const double p_after = row_of(a.offset_runs.back().report, Subset::forget).probability;
        c8.require(p_after > 0.5 * p_before, "relabeling original-answer probability not above half");
        c8.detail << "relabel probability " << fmt(p_after) << " vs memorized " << fmt(p_before) << " ";
        report(8, "algorithm plurality", c8, a.seconds_total, failures);

        RunConfig cfg_b = cfg;
        cfg_b.out_dir = (work / "b").string();
        log("pipeline run b (repro): " + cfg_b.out_dir);
        t = Clock::now();
        stage_repro(cfg_b, log);
        Verdict c9;
        std::size_t n_compared = 0;
        for (const auto &entry : fs::recursive_directory_iterator(cfg.out_dir)) {
            const fs::path rel = fs::relative(entry.path(), cfg.out_dir);
            if (!entry.is_regular_file() || !compared(rel)) {
                continue;
            }
            ++n_compared;
            const fs::path other = fs::path(cfg_b.out_dir) / rel;
            c9.require(fs::exists(other) && slurp(entry.path()) == slurp(other), rel.string() + " differs");
        }
        c9.require(n_compared > 0, "nothing compared");
        c9.detail << n_compared << " dataset, trajectory and report files byte-identical ";
        report(9, "determinism", c9, seconds_since(t), failures);
    } catch (const std::exception &e) {
        std::cout << "acceptance aborted: " << e.what() << std::endl;
        return 1;
    }
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
              << fmt(seconds_since(start), 1) << " s" << std::endl;
    return failures == 0 ? 0 : 1;
}
