// delta-unlearn: command-line driver for the offset unlearning pipeline.

#include "delta/config.hpp"
#include "delta/error.hpp"
#include "delta/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

using namespace delta;

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::string> out_dir;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App *sub, CommonFlags &f) {
    sub->add_option("--config", f.config_path, "TOML config file");
    sub->add_option("--set", f.sets, "Override one config key, e.g. --set unlearn.epochs=3")->take_all();
    sub->add_option("--out-dir", f.out_dir, "Output directory");
    sub->add_option("--seed", f.seed, "Global seed");
}

// defaults < file < --set < dedicated flags
RunConfig resolve(const CommonFlags &f) {
    RunConfig cfg = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
    for (const std::string &s : f.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            throw ConfigurationError("--set expects key=value, got '" + s + "'");
        }
        try {
            cfg.set(s.substr(0, eq), parse_toml_value(s.substr(eq + 1)));
        } catch (const ParseError &) {
            // Bare words are accepted as strings on the command line.
            cfg.set(s.substr(0, eq), TomlValue{s.substr(eq + 1)});
        }
    }
    if (f.out_dir) {
        cfg.out_dir = *f.out_dir;
    }
    if (f.seed) {
        cfg.seed = *f.seed;
    }
    return cfg;
}

Logger make_logger(const std::string &out_dir) {
    const auto start = std::chrono::steady_clock::now();
    return [start, out_dir](const std::string &msg) {
        const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        char head[32];
        std::snprintf(head, sizeof head, "[%8.1fs] ", t);
        std::cerr << head << msg << std::endl;
        std::ofstream log(std::filesystem::path(out_dir) / "logs" / "run.log", std::ios::app);
        if (log) {
            log << head << msg << '\n';
        }
    };
}

std::vector<double> parse_alphas(const std::string &s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw std::invalid_argument(item);
            }
        } catch (const std::exception &) {
            throw ConfigurationError("bad alpha '" + item + "'");
        }
    }
    return out;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Offset unlearning for frozen language models"};
    app.require_subcommand(1);
    CommonFlags flags;

    auto *gen = app.add_subcommand("gen-data", "Generate (or ingest) the dataset splits and tokenizer");
    add_common(gen, flags);
    std::string tofu_dir;
    gen->add_option("--tofu-dir", tofu_dir, "Ingest forget/retain/... jsonl files instead of generating");

    auto *pre = app.add_subcommand("pretrain", "Train the base large and small models on the control mix");
    add_common(pre, flags);

    auto *mem = app.add_subcommand("memorize", "Fine-tune both base models on the full fictitious set");
    add_common(mem, flags);
    bool skip_offset = false;
    mem->add_flag("--skip-offset", skip_offset, "Keep the offset model at its pretrained state");

    auto *ret = app.add_subcommand("retrain", "Retraining baseline without the forget set; writes the target");
    add_common(ret, flags);

    auto *unl = app.add_subcommand("unlearn", "Run one unlearning algorithm");
    add_common(unl, flags);
    std::optional<std::string> algorithm, mode;
    std::optional<double> lr, alpha_train;
    std::optional<int> epochs;
    bool match = false;
    unl->add_option("--algorithm", algorithm, "gradient_ascent|gradient_difference|kl_minimization|data_relabeling");
    unl->add_option("--mode", mode, "offset|direct");
    auto *lr_opt = unl->add_option("--lr", lr, "Fixed learning rate (disables target matching)");
    unl->add_flag("--match-target", match, "Match the retrain target by learning-rate search")->excludes(lr_opt);
    unl->add_option("--alpha", alpha_train, "Offset strength during training");
    unl->add_option("--epochs", epochs, "Epochs");

    auto *ev = app.add_subcommand("eval", "Evaluate a checkpoint or an offset ensemble");
    add_common(ev, flags);
    std::string ckpt, ensemble, name = "eval";
    double eval_alpha = 1.0;
    auto *ck_opt = ev->add_option("--checkpoint", ckpt, "Single model checkpoint (default: memorized large)");
    ev->add_option("--ensemble", ensemble, "Trained offset checkpoint; evaluates the ensemble")->excludes(ck_opt);
    ev->add_option("--alpha", eval_alpha, "Offset strength at inference");
    ev->add_option("--name", name, "Report name under reports/");

    auto *sw = app.add_subcommand("sweep", "Evaluate ROUGE over a grid of inference alphas");
    add_common(sw, flags);
    std::string alphas, sweep_ckpt, sweep_name = "sweep";
    sw->add_option("--alphas", alphas, "Comma-separated, strictly increasing");
    sw->add_option("--offset", sweep_ckpt, "Trained offset checkpoint (default: gradient ascent run)");
    sw->add_option("--name", sweep_name, "Report name under reports/");

    auto *rep = app.add_subcommand("repro", "Run every stage end to end");
    add_common(rep, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ExitCode::configuration);
    }

    try {
        RunConfig cfg = resolve(flags);
        if (!tofu_dir.empty()) {
            cfg.tofu_dir = tofu_dir;
        }
        if (skip_offset) {
            cfg.memorize_offset = false;
        }
        if (algorithm) {
            cfg.unlearn.algorithm = algorithm_from_string(*algorithm);
        }
        if (mode) {
            cfg.unlearn.mode = mode_from_string(*mode);
        }
        if (lr) {
            cfg.unlearn.learning_rate = *lr;
            cfg.match_target = false;
        }
        if (match) {
            cfg.match_target = true;
        }
        if (alpha_train) {
            cfg.unlearn.alpha_train = *alpha_train;
        }
        if (epochs) {
            cfg.unlearn.epochs = *epochs;
        }
        if (!alphas.empty()) {
            cfg.sweep_alphas = parse_alphas(alphas);
        }
        cfg.validate();
        Workspace(cfg.out_dir).create();
        Logger log = make_logger(cfg.out_dir);

        if (*gen) {
            stage_gen_data(cfg, log);
        } else if (*rep) {
            stage_repro(cfg, log);
        } else {
            Context ctx = load_context(cfg, log);
            if (*pre) {
                stage_pretrain(ctx);
            } else if (*mem) {
                stage_memorize(ctx);
            } else if (*ret) {
                stage_retrain(ctx);
            } else if (*unl) {
                stage_unlearn(ctx, cfg.unlearn.algorithm, cfg.unlearn.mode);
            } else if (*ev) {
                EvalTarget t{ckpt, ensemble, eval_alpha, name};
                const EvalReport r = stage_eval(ctx, t);
                std::cout << r.to_csv();
            } else if (*sw) {
                const std::string path = sweep_ckpt.empty()
                                             ? ctx.ws.checkpoint("unlearn_" +
                                                                 run_tag(Algorithm::gradient_ascent, Mode::offset) +
                                                                 ".ckpt")
                                             : sweep_ckpt;
                std::cout << sweep_csv(stage_sweep(ctx, path, cfg.sweep_alphas, sweep_name));
            }
        }
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.exit_code());
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::failure);
    }
    return 0;
}
