#include "delta/pipeline.hpp"

#include "delta/error.hpp"
#include "delta/rng.hpp"

#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace delta {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

Workspace::Workspace(std::string root) : root_(std::move(root)) {}

std::string Workspace::data(const std::string &name) const { return (fs::path(root_) / "data" / name).string(); }
std::string Workspace::checkpoint(const std::string &name) const {
    return (fs::path(root_) / "checkpoints" / name).string();
}
std::string Workspace::report(const std::string &name) const { return (fs::path(root_) / "reports" / name).string(); }
std::string Workspace::log(const std::string &name) const { return (fs::path(root_) / "logs" / name).string(); }

void Workspace::create() const {
    std::error_code ec;
    for (const char *sub : {"data", "checkpoints", "reports", "logs"}) {
        fs::create_directories(fs::path(root_) / sub, ec);
        if (ec) {
            throw IoError("cannot create " + (fs::path(root_) / sub).string() + ": " + ec.message());
        }
    }
}

void Context::info(const std::string &msg) const {
    if (log) {
        log(msg);
    }
}

void write_text(const std::string &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << text;
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

std::string read_text(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string run_tag(Algorithm a, Mode m) { return to_string(a) + "_" + to_string(m); }

namespace {

const char *kBaseLarge = "base_large.ckpt";
const char *kBaseSmall = "base_small.ckpt";
const char *kMemLarge = "memorized_large.ckpt";
const char *kMemSmall = "memorized_small.ckpt";
const char *kRetrainLarge = "retrain_large.ckpt";

std::vector<TokenizedQA> tokenize_all(const Tokenizer &tok, const std::vector<QAExample> &examples) {
    std::vector<TokenizedQA> out;
    out.reserve(examples.size());
    for (const QAExample &e : examples) {
        out.push_back(tokenize_qa(tok, e.id, e.question, e.answer));
    }
    return out;
}

std::vector<QAExample> control_mix(const DatasetSplits &s) {
    std::vector<QAExample> out = s.real_analog;
    out.insert(out.end(), s.world_analog.begin(), s.world_analog.end());
    out.insert(out.end(), s.general_heldout.begin(), s.general_heldout.end());
    return out;
}

TrainConfig train_config(const StageConfig &s, std::uint64_t seed) {
    return TrainConfig{s.epochs, s.batch_size, s.lr, s.clip_norm, seed};
}

// Trains and records the per-epoch loss in logs/.
void train_logged(const Context &ctx, LanguageModel &m, const std::vector<TokenizedQA> &data, const TrainConfig &tc,
                  const std::string &name) {
    std::ostringstream csv;
    csv << "epoch,loss\n";
    finetune(m, data, tc, [&](int epoch, double loss) {
        csv << epoch << ',' << format_number(loss) << '\n';
        if (epoch % 10 == 0 || epoch == tc.epochs) {
            ctx.info(name + ": epoch " + std::to_string(epoch) + "/" + std::to_string(tc.epochs) +
                     " loss " + format_number(loss));
        }
    });
    write_text(ctx.ws.log(name + "_loss.csv"), csv.str());
}

LanguageModel load_frozen(const std::string &path) {
    if (!fs::exists(path)) {
        throw ConfigurationError("missing checkpoint " + path + "; run the earlier stages first");
    }
    LanguageModel m = load_checkpoint(path);
    m.set_frozen(true);
    return m;
}

void write_report(const Context &ctx, EvalReport &rep, const std::string &name) {
    write_text(ctx.ws.report(name + ".json"), rep.to_json());
    write_text(ctx.ws.report(name + ".csv"), rep.to_csv());
}

void write_config(const Context &ctx, const std::string &stage) {
    write_text(ctx.ws.report(stage + "_config.toml"), ctx.cfg.to_toml());
}

std::string timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

ordered_json digest_of(const std::string &path) {
    const std::string bytes = read_text(path);
    return to_hex(sha256(bytes));
}

} // namespace

Context load_context(const RunConfig &cfg, Logger log) {
    cfg.validate();
    Workspace ws(cfg.out_dir);
    if (!fs::exists(ws.data("forget.jsonl"))) {
        throw ConfigurationError("no dataset under " + ws.data("") + "; run gen-data first");
    }
    ws.create();
    Context ctx{cfg, ws, load_splits(ws.data("")), Tokenizer::load(ws.data("tokenizer.json")), std::move(log)};
    return ctx;
}

DatasetSplits stage_gen_data(const RunConfig &cfg, Logger log) {
    cfg.validate();
    Workspace ws(cfg.out_dir);
    ws.create();
    DatasetSplits splits;
    if (!cfg.tofu_dir.empty()) {
        splits = ingest_tofu_format(cfg.tofu_dir);
        splits.seed = cfg.seed;
    } else {
        CorpusParams p = cfg.corpus;
        p.seed = derive_seed(cfg.seed, "corpus");
        splits = generate_corpus(p);
    }
    Tokenizer tok = build_tokenizer(splits);
    const VocabularyReport vr = vocabulary_report(tok, splits);
    if (!vr.ok()) {
        throw InvariantViolation("tokenizer does not cover the corpus: " + vr.to_string());
    }
    save_splits(splits, ws.data(""));
    tok.save(ws.data("tokenizer.json"));
    write_text(ws.report("gen_data_config.toml"), cfg.to_toml());
    if (log) {
        log("gen-data: " + std::to_string(splits.forget.size()) + " forget, " + std::to_string(splits.retain.size()) +
            " retain, vocabulary " + std::to_string(tok.size()));
    }
    return splits;
}

void stage_pretrain(const Context &ctx) {
    write_config(ctx, "pretrain");
    const auto data = tokenize_all(ctx.tok, control_mix(ctx.splits));
    const int v = static_cast<int>(ctx.tok.size());
    const std::uint64_t seed = ctx.cfg.seed;
    LanguageModel large(ctx.cfg.large_config(v), ctx.tok.digest(), derive_seed(seed, "init.large"));
    train_logged(ctx, large, data, train_config(ctx.cfg.pretrain, derive_seed(seed, "pretrain.large")),
                 "pretrain_large");
    save_checkpoint(large, ctx.ws.checkpoint(kBaseLarge));
    LanguageModel small(ctx.cfg.small_config(v), ctx.tok.digest(), derive_seed(seed, "init.small"));
    train_logged(ctx, small, data, train_config(ctx.cfg.pretrain, derive_seed(seed, "pretrain.small")),
                 "pretrain_small");
    save_checkpoint(small, ctx.ws.checkpoint(kBaseSmall));
}

EvalReport stage_memorize(const Context &ctx) {
    write_config(ctx, "memorize");
    std::vector<QAExample> mix = ctx.splits.full();
    if (ctx.cfg.replay_controls) {
        const auto ctl = control_mix(ctx.splits);
        mix.insert(mix.end(), ctl.begin(), ctl.end());
    }
    const auto data = tokenize_all(ctx.tok, mix);
    const TrainConfig tc = train_config(ctx.cfg.memorize, derive_seed(ctx.cfg.seed, "memorize"));

    LanguageModel large = load_checkpoint(ctx.ws.checkpoint(kBaseLarge));
    train_logged(ctx, large, data, tc, "memorize_large");
    save_checkpoint(large, ctx.ws.checkpoint(kMemLarge));

    LanguageModel small = load_checkpoint(ctx.ws.checkpoint(kBaseSmall));
    if (ctx.cfg.memorize_offset) {
        train_logged(ctx, small, data, tc, "memorize_small");
    }
    save_checkpoint(small, ctx.ws.checkpoint(kMemSmall));

    EvalReport rep = evaluate(ModelSource(large), ctx.tok, ctx.splits, ctx.cfg.eval);
    rep.scorer = "memorized large model";
    rep.manifest = "memorize_config.toml";
    write_report(ctx, rep, "memorized");
    ctx.info("memorize: forget ROUGE " + format_number(rep.row(Subset::forget).rouge_l_recall) + ", retain ROUGE " +
             format_number(rep.row(Subset::retain).rouge_l_recall));
    return rep;
}

RetrainOutcome stage_retrain(const Context &ctx) {
    write_config(ctx, "retrain");
    std::vector<QAExample> mix = ctx.splits.retain;
    if (ctx.cfg.replay_controls) {
        const auto ctl = control_mix(ctx.splits);
        mix.insert(mix.end(), ctl.begin(), ctl.end());
    }
    const auto data = tokenize_all(ctx.tok, mix);
    const TrainConfig tc = train_config(ctx.cfg.memorize, derive_seed(ctx.cfg.seed, "memorize"));
    const LanguageModel base = load_checkpoint(ctx.ws.checkpoint(kBaseLarge));
    ctx.info("retrain: fine-tuning the base model without the forget set");
    LanguageModel model = retrain_baseline(base, data, tc);
    save_checkpoint(model, ctx.ws.checkpoint(kRetrainLarge));

    RetrainOutcome out;
    out.report = evaluate(ModelSource(model), ctx.tok, ctx.splits, ctx.cfg.eval);
    out.report.scorer = "retrained large model";
    out.report.manifest = "retrain_config.toml";
    write_report(ctx, out.report, "retrain");
    out.target_forget_rouge = out.report.row(Subset::forget).rouge_l_recall;
    ordered_json j;
    j["target_forget_rouge"] = out.target_forget_rouge;
    j["retain_rouge"] = out.report.row(Subset::retain).rouge_l_recall;
    j["checkpoint_sha256"] = digest_of(ctx.ws.checkpoint(kRetrainLarge));
    write_text(ctx.ws.report("retrain_target.json"), j.dump(2) + "\n");
    ctx.info("retrain: target forget ROUGE " + format_number(out.target_forget_rouge));
    return out;
}

double read_retrain_target(const Workspace &ws) {
    const std::string path = ws.report("retrain_target.json");
    if (!fs::exists(path)) {
        throw ConfigurationError("no retrain target at " + path + "; run retrain first or pass an explicit lr");
    }
    try {
        return nlohmann::json::parse(read_text(path)).at("target_forget_rouge").get<double>();
    } catch (const nlohmann::json::exception &e) {
        throw ParseError(path + ": " + e.what());
    }
}

namespace {

TrajectoryRow score_row(const LogitSource &src, const Context &ctx) {
    const int n = ctx.cfg.eval.max_new_tokens;
    TrajectoryRow r;
    r.forget = mean_rouge(src, ctx.tok, ctx.splits.forget, n);
    r.retain = mean_rouge(src, ctx.tok, ctx.splits.retain, n);
    r.real = mean_rouge(src, ctx.tok, ctx.splits.real_analog, n);
    r.world = mean_rouge(src, ctx.tok, ctx.splits.world_analog, n);
    return r;
}

} // namespace

UnlearnOutcome stage_unlearn(const Context &ctx, Algorithm algorithm, Mode mode) {
    const std::string tag = run_tag(algorithm, mode);
    write_config(ctx, "unlearn_" + tag);
    UnlearnOutcome out;
    out.config = ctx.cfg.unlearn;
    out.config.algorithm = algorithm;
    out.config.mode = mode;
    out.config.seed = derive_seed(ctx.cfg.seed, "unlearn." + tag);

    const LanguageModel large = load_frozen(ctx.ws.checkpoint(kMemLarge));
    const LanguageModel offset = load_frozen(ctx.ws.checkpoint(kMemSmall));
    const UnlearnData data = make_unlearn_data(ctx.tok, ctx.splits);
    const FrozenLogitCache cache = FrozenLogitCache::build(large, offset, cache_examples(data));

    // One training run from the memorized state; returns the scorer-side
    // trained model so the caller can evaluate or save it.
    auto train = [&](const UnlearnConfig &cfg, const TrajectoryEvaluator *ev, UnlearnResult &res) {
        if (mode == Mode::offset) {
            LanguageModel trainable = offset;
            trainable.set_frozen(false);
            OffsetEnsemble ens(large, offset, trainable, cfg.alpha_train);
            res = unlearn_run(ens, data, cache, cfg, ev);
            return trainable;
        }
        DirectResult d = direct_finetune_run(large, data, cache, cfg, ev);
        res = std::move(d.result);
        return std::move(d.model);
    };
    auto scorer_rouge = [&](LanguageModel &trained, double alpha) {
        if (mode == Mode::offset) {
            OffsetEnsemble ens(large, offset, trained, alpha);
            return mean_rouge(ens, ctx.tok, ctx.splits.forget, ctx.cfg.eval.max_new_tokens);
        }
        return mean_rouge(ModelSource(trained), ctx.tok, ctx.splits.forget, ctx.cfg.eval.max_new_tokens);
    };

    if (ctx.cfg.match_target) {
        out.target_forget_rouge = read_retrain_target(ctx.ws);
        int run = 0;
        TrialFn trial = [&](const UnlearnConfig &cfg) {
            UnlearnResult res;
            LanguageModel trained = train(cfg, nullptr, res);
            const double r = scorer_rouge(trained, cfg.alpha_train);
            ctx.info(tag + ": search run " + std::to_string(++run) + " lr " + std::to_string(cfg.learning_rate) +
                     " forget ROUGE " + format_number(r));
            return r;
        };
        LrSearchResult sr = match_target_by_lr(trial, out.config, out.target_forget_rouge, ctx.cfg.search);
        write_text(ctx.ws.log("lr_search_" + tag + ".csv"), sr.trials_csv());
        out.config = sr.config;
        out.warnings = sr.warnings;
        out.search = std::move(sr);
    }

    TrajectoryEvaluator ev = [&](const LogitSource &src) { return score_row(src, ctx); };
    UnlearnResult res;
    LanguageModel trained = train(out.config, &ev, res);
    out.trajectory = res.trajectory;
    out.warnings.insert(out.warnings.end(), res.warnings.begin(), res.warnings.end());
    write_text(ctx.ws.log("trajectory_" + tag + ".csv"), out.trajectory.to_csv());
    write_text(ctx.ws.log("tradeoff_" + tag + ".csv"), tradeoff_curve_csv(out.trajectory));
    {
        std::ostringstream csv;
        csv << "step,loss\n";
        for (std::size_t i = 0; i < res.step_losses.size(); ++i) {
            csv << i + 1 << ',' << format_number(res.step_losses[i]) << '\n';
        }
        write_text(ctx.ws.log("steps_" + tag + ".csv"), csv.str());
    }
    out.checkpoint_path = ctx.ws.checkpoint("unlearn_" + tag + ".ckpt");
    save_checkpoint(trained, out.checkpoint_path);

    if (mode == Mode::offset) {
        OffsetEnsemble ens(large, offset, trained, out.config.alpha_train);
        out.report = evaluate(ens, ctx.tok, ctx.splits, ctx.cfg.eval);
        out.report.scorer = "offset ensemble, " + to_string(algorithm);
    } else {
        out.report = evaluate(ModelSource(trained), ctx.tok, ctx.splits, ctx.cfg.eval);
        out.report.scorer = "direct fine-tuning, " + to_string(algorithm);
    }
    out.report.alpha = mode == Mode::offset ? out.config.alpha_train : 0.0;
    out.report.manifest = "manifest_" + tag + ".json";
    write_report(ctx, out.report, "unlearn_" + tag);

    ordered_json m;
    m["created"] = timestamp();
    m["algorithm"] = to_string(algorithm);
    m["mode"] = to_string(mode);
    m["global_seed"] = ctx.cfg.seed;
    m["run_seed"] = out.config.seed;
    m["learning_rate"] = out.config.learning_rate;
    m["alpha_train"] = out.config.alpha_train;
    m["epochs"] = out.config.epochs;
    m["effective_batch_size"] = effective_batch_size(out.config, data.forget.size());
    if (out.search) {
        m["target_forget_rouge"] = out.target_forget_rouge;
        m["matched"] = out.search->matched;
        m["search_forget_rouge"] = out.search->forget_rouge;
        ordered_json trials = ordered_json::array();
        for (const LrTrial &t : out.search->trials) {
            trials.push_back({{"lr", t.lr}, {"forget_rouge", t.forget_rouge}, {"numerical_failure", t.numerical_failure}});
        }
        m["lr_trials"] = trials;
    }
    m["final_forget_rouge"] = out.report.row(Subset::forget).rouge_l_recall;
    m["warnings"] = out.warnings;
    m["checkpoints"] = {{"large", digest_of(ctx.ws.checkpoint(kMemLarge))},
                        {"offset_frozen", digest_of(ctx.ws.checkpoint(kMemSmall))},
                        {"trained", digest_of(out.checkpoint_path)}};
    m["frozen_cache_sha256"] = to_hex(cache.content_digest());
    m["config"] = ctx.cfg.to_toml();
    write_text(ctx.ws.report(out.report.manifest), m.dump(2) + "\n");

    // The frozen checkpoints on disk must still match what was loaded.
    if (load_checkpoint(ctx.ws.checkpoint(kMemLarge)).content_digest() != large.content_digest() ||
        load_checkpoint(ctx.ws.checkpoint(kMemSmall)).content_digest() != offset.content_digest()) {
        throw InvariantViolation("frozen checkpoint files changed during unlearning");
    }
    for (const std::string &w : out.warnings) {
        ctx.info(tag + ": warning: " + w);
    }
    ctx.info(tag + ": lr " + std::to_string(out.config.learning_rate) + ", forget ROUGE " +
             format_number(out.report.row(Subset::forget).rouge_l_recall));
    return out;
}

EvalReport stage_eval(const Context &ctx, const EvalTarget &target) {
    EvalReport rep;
    if (!target.offset_checkpoint.empty()) {
        const LanguageModel large = load_frozen(ctx.ws.checkpoint(kMemLarge));
        const LanguageModel offset = load_frozen(ctx.ws.checkpoint(kMemSmall));
        LanguageModel trained = load_checkpoint(target.offset_checkpoint, offset.config());
        OffsetEnsemble ens(large, offset, trained, target.alpha);
        rep = evaluate(ens, ctx.tok, ctx.splits, ctx.cfg.eval);
        rep.scorer = "offset ensemble from " + fs::path(target.offset_checkpoint).filename().string();
        rep.alpha = target.alpha;
    } else {
        const std::string path = target.checkpoint.empty() ? ctx.ws.checkpoint(kMemLarge) : target.checkpoint;
        const LanguageModel m = load_frozen(path);
        rep = evaluate(ModelSource(m), ctx.tok, ctx.splits, ctx.cfg.eval);
        rep.scorer = "model " + fs::path(path).filename().string();
    }
    rep.manifest = target.name + "_config.toml";
    write_config(ctx, target.name);
    write_report(ctx, rep, target.name);
    return rep;
}

std::vector<SweepRow> stage_sweep(const Context &ctx, const std::string &offset_checkpoint,
                                  const std::vector<double> &alphas, const std::string &name) {
    const LanguageModel large = load_frozen(ctx.ws.checkpoint(kMemLarge));
    const LanguageModel offset = load_frozen(ctx.ws.checkpoint(kMemSmall));
    LanguageModel trained = load_checkpoint(offset_checkpoint, offset.config());
    trained.set_frozen(true);
    const Digest before = trained.content_digest();
    OffsetEnsemble ens(large, offset, trained, 1.0);
    std::vector<SweepRow> rows = alpha_sweep(ens, ctx.tok, ctx.splits, alphas, ctx.cfg.eval.max_new_tokens);
    if (trained.content_digest() != before) {
        throw InvariantViolation("alpha sweep modified the offset model");
    }
    write_text(ctx.ws.report(name + ".csv"), sweep_csv(rows));
    ctx.info(name + ": " + std::to_string(rows.size()) + " alphas");
    return rows;
}

ReproOutcome stage_repro(const RunConfig &cfg, Logger log) {
    ReproOutcome out;
    stage_gen_data(cfg, log);
    Context ctx = load_context(cfg, log);
    stage_pretrain(ctx);
    out.memorized = stage_memorize(ctx);
    out.retrain = stage_retrain(ctx);
    for (Algorithm a : kAllAlgorithms) {
        out.runs.push_back(stage_unlearn(ctx, a, Mode::offset));
    }
    out.runs.push_back(stage_unlearn(ctx, Algorithm::gradient_ascent, Mode::direct));
    out.sweep = stage_sweep(ctx, out.runs.front().checkpoint_path, cfg.sweep_alphas, "sweep_gradient_ascent");

    ordered_json s;
    s["memorized"] = {{"forget_rouge", out.memorized.row(Subset::forget).rouge_l_recall},
                      {"retain_rouge", out.memorized.row(Subset::retain).rouge_l_recall}};
    s["retrain"] = {{"forget_rouge", out.retrain.report.row(Subset::forget).rouge_l_recall},
                    {"retain_rouge", out.retrain.report.row(Subset::retain).rouge_l_recall}};
    ordered_json runs = ordered_json::array();
    for (const UnlearnOutcome &r : out.runs) {
        ordered_json j;
        j["algorithm"] = to_string(r.config.algorithm);
        j["mode"] = to_string(r.config.mode);
        j["learning_rate"] = r.config.learning_rate;
        j["matched"] = r.search ? r.search->matched : false;
        for (Subset sub : kScoredSubsets) {
            const MetricRow &row = r.report.row(sub);
            j[to_string(sub)] = {{"rouge", row.rouge_l_recall},
                                 {"probability", row.probability},
                                 {"truth_ratio_score", row.truth_ratio_score}};
        }
        j["general_accuracy"] = r.report.general_accuracy;
        runs.push_back(j);
    }
    s["runs"] = runs;
    write_text(ctx.ws.report("summary.json"), s.dump(2) + "\n");
    return out;
}

} // namespace delta
