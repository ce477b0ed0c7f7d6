#include "delta/eval.hpp"

#include "delta/error.hpp"
#include "delta/parallel.hpp"
#include "delta/sequence.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace delta {

std::vector<std::string> rouge_tokens(const std::string &text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c) || c >= 0x80) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l_recall(const std::string &generated, const std::string &reference) {
    std::vector<std::string> ref = rouge_tokens(reference);
    DELTA_CHECK(!ref.empty(), ContractError, "rouge_l_recall: reference has no tokens");
    std::vector<std::string> gen = rouge_tokens(generated);
    return static_cast<double>(lcs_length(gen, ref)) / static_cast<double>(ref.size());
}

double answer_probability(const LogitSource &scorer, std::span<const TokenId> prompt,
                          std::span<const TokenId> answer) {
    DELTA_CHECK(!prompt.empty() && !answer.empty(), ContractError, "answer_probability needs a prompt and an answer");
    std::vector<TokenId> ids(prompt.begin(), prompt.end());
    ids.insert(ids.end(), answer.begin(), answer.end() - 1);
    Tensor logits = scorer.sequence_logits(ids);
    std::vector<double> logp(logits.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < answer.size(); ++i) {
        log_softmax_row(logits.row(prompt.size() - 1 + i), logp);
        total += logp[static_cast<std::size_t>(answer[i])];
    }
    return std::exp(total / static_cast<double>(answer.size()));
}

double answer_probability(const LogitSource &scorer, const Tokenizer &tok, const std::string &question,
                          const std::string &answer) {
    std::vector<TokenId> p = prompt_ids(tok, question);
    std::vector<TokenId> a = tok.encode(answer);
    return answer_probability(scorer, p, a);
}

TruthRatio normalized_truth_ratio(double p_reference, std::span<const double> p_wrong, Subset subset,
                                  bool geometric_mean) {
    DELTA_CHECK(!p_wrong.empty(), ContractError, "truth ratio needs at least one perturbed answer");
    TruthRatio tr;
    if (p_reference < kProbabilityFloor) {
        p_reference = kProbabilityFloor;
        tr.floored = true;
    }
    double wrong = 0.0;
    if (geometric_mean) {
        for (double p : p_wrong) {
            wrong += std::log(std::max(p, kProbabilityFloor));
        }
        wrong = std::exp(wrong / static_cast<double>(p_wrong.size()));
    } else {
        for (double p : p_wrong) {
            wrong += p;
        }
        wrong /= static_cast<double>(p_wrong.size());
    }
    tr.ratio = wrong / p_reference;
    double score = subset == Subset::forget ? (tr.ratio > 0.0 ? 1.0 - 1.0 / tr.ratio : 0.0) : 1.0 - tr.ratio;
    if (!std::isfinite(score)) {
        score = 0.0;
    }
    tr.score = std::clamp(score, 0.0, 1.0);
    return tr;
}

TruthRatio truth_ratio_score(const LogitSource &scorer, const Tokenizer &tok, const QAExample &example,
                             bool geometric_mean, bool paraphrase_reference) {
    const std::string &ref =
        example.paraphrased_answer.empty() || !paraphrase_reference ? example.answer : example.paraphrased_answer;
    double p_ref = answer_probability(scorer, tok, example.question, ref);
    std::vector<double> p_wrong;
    for (const std::string &w : example.perturbed_answers) {
        p_wrong.push_back(answer_probability(scorer, tok, example.question, w));
    }
    return normalized_truth_ratio(p_ref, p_wrong, example.subset, geometric_mean);
}

std::vector<Generation> generate_answers(const LogitSource &scorer, const Tokenizer &tok,
                                         const std::vector<QAExample> &examples, int max_new_tokens) {
    std::vector<Generation> out(examples.size());
    parallel_for(examples.size(), [&](std::size_t i) {
        const QAExample &e = examples[i];
        std::vector<TokenId> gen = greedy_generate(scorer, prompt_ids(tok, e.question), max_new_tokens);
        out[i].id = e.id;
        out[i].output = tok.decode(gen);
        out[i].rouge = rouge_l_recall(out[i].output, e.answer);
    });
    return out;
}

double mean_rouge(const LogitSource &scorer, const Tokenizer &tok, const std::vector<QAExample> &examples,
                  int max_new_tokens) {
    if (examples.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const Generation &g : generate_answers(scorer, tok, examples, max_new_tokens)) {
        total += g.rouge;
    }
    return total / static_cast<double>(examples.size());
}

MetricRow evaluate_subset(const LogitSource &scorer, const Tokenizer &tok, const std::vector<QAExample> &examples,
                          Subset subset, const EvalOptions &opts, std::vector<Generation> *generations) {
    MetricRow row;
    row.subset = subset;
    row.n = examples.size();
    if (examples.empty()) {
        return row;
    }
    std::vector<Generation> gens = generate_answers(scorer, tok, examples, opts.max_new_tokens);
    std::vector<double> prob(examples.size(), 0.0);
    std::vector<TruthRatio> tr(examples.size());
    if (opts.likelihood_metrics) {
        parallel_for(examples.size(), [&](std::size_t i) {
            prob[i] = answer_probability(scorer, tok, examples[i].question, examples[i].answer);
            if (!examples[i].perturbed_answers.empty()) {
                tr[i] = truth_ratio_score(scorer, tok, examples[i], opts.geometric_truth_ratio, opts.paraphrase_reference);
            }
        });
    }
    const double n = static_cast<double>(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        row.rouge_l_recall += gens[i].rouge / n;
        row.probability += prob[i] / n;
        row.truth_ratio += tr[i].ratio / n;
        row.truth_ratio_score += tr[i].score / n;
        row.floored += tr[i].floored ? 1 : 0;
        row.answer_as_reference =
            row.answer_as_reference || examples[i].paraphrased_answer.empty() || !opts.paraphrase_reference;
    }
    if (generations) {
        generations->insert(generations->end(), gens.begin(), gens.end());
    }
    return row;
}

EvalReport evaluate(const LogitSource &scorer, const Tokenizer &tok, const DatasetSplits &splits,
                    const EvalOptions &opts) {
    EvalReport rep;
    for (Subset s : kScoredSubsets) {
        rep.rows.push_back(evaluate_subset(scorer, tok, splits.subset(s), s, opts, &rep.generations));
    }
    const std::vector<QAExample> &general = splits.general_heldout;
    rep.general_n = general.size();
    if (!general.empty()) {
        std::vector<Generation> gens = generate_answers(scorer, tok, general, opts.max_new_tokens);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < general.size(); ++i) {
            hits += gens[i].output == general[i].answer ? 1 : 0;
        }
        rep.general_accuracy = static_cast<double>(hits) / static_cast<double>(general.size());
        rep.generations.insert(rep.generations.end(), gens.begin(), gens.end());
    }
    return rep;
}

const MetricRow &EvalReport::row(Subset s) const {
    for (const MetricRow &r : rows) {
        if (r.subset == s) {
            return r;
        }
    }
    throw ContractError("report has no row for subset " + delta::to_string(s));
}

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["manifest"] = manifest;
    j["scorer"] = scorer;
    j["alpha"] = alpha;
    nlohmann::ordered_json rows_j = nlohmann::ordered_json::array();
    for (const MetricRow &r : rows) {
        nlohmann::ordered_json rj;
        rj["subset"] = delta::to_string(r.subset);
        rj["n"] = r.n;
        rj["rouge_l_recall"] = r.rouge_l_recall;
        rj["probability"] = r.probability;
        rj["truth_ratio"] = r.truth_ratio;
        rj["truth_ratio_score"] = r.truth_ratio_score;
        rj["truth_ratio_reference"] = r.answer_as_reference ? "answer" : "paraphrase";
        rj["probability_floor_hits"] = r.floored;
        rows_j.push_back(rj);
    }
    j["subsets"] = rows_j;
    j["general_heldout"] = {{"n", general_n}, {"exact_match", general_accuracy}};
    nlohmann::ordered_json gens = nlohmann::ordered_json::array();
    for (const Generation &g : generations) {
        gens.push_back({{"id", g.id}, {"output", g.output}, {"rouge_l_recall", g.rouge}});
    }
    j["generations"] = gens;
    return j.dump(2) + "\n";
}

std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << "subset,n,rouge_l_recall,probability,truth_ratio,truth_ratio_score\n";
    for (const MetricRow &r : rows) {
        os << delta::to_string(r.subset) << ',' << r.n << ',' << format_number(r.rouge_l_recall) << ','
           << format_number(r.probability) << ',' << format_number(r.truth_ratio) << ','
           << format_number(r.truth_ratio_score) << '\n';
    }
    os << "general_heldout," << general_n << ',' << format_number(general_accuracy) << ",,,\n";
    return os.str();
}

std::string TrajectoryLog::to_csv() const {
    std::ostringstream os;
    os << "step,loss,forget_rouge,retain_rouge,real_rouge,world_rouge\n";
    for (const TrajectoryRow &r : rows) {
        os << r.step << ',' << format_number(r.loss) << ',' << format_number(r.forget) << ','
           << format_number(r.retain) << ',' << format_number(r.real) << ',' << format_number(r.world) << '\n';
    }
    return os.str();
}

TrajectoryLog TrajectoryLog::from_csv(const std::string &text) {
    std::istringstream in(text);
    std::string line;
    DELTA_CHECK(std::getline(in, line) && line == "step,loss,forget_rouge,retain_rouge,real_rouge,world_rouge",
                ParseError, "trajectory CSV has an unexpected header");
    TrajectoryLog log;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        TrajectoryRow r;
        char tail = 0;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf%c", &r.step, &r.loss, &r.forget, &r.retain, &r.real,
                        &r.world, &tail) != 6) {
            throw ParseError("trajectory CSV line " + std::to_string(line_no) + " is malformed");
        }
        log.rows.push_back(r);
    }
    return log;
}

const std::vector<double> &default_sweep_alphas() {
    static const std::vector<double> a{0.0, 0.2, 0.5, 1.0, 2.0, 5.0};
    return a;
}

std::vector<SweepRow> alpha_sweep(OffsetEnsemble &ens, const Tokenizer &tok, const DatasetSplits &splits,
                                  const std::vector<double> &alphas, int max_new_tokens) {
    for (std::size_t i = 1; i < alphas.size(); ++i) {
        DELTA_CHECK(alphas[i] > alphas[i - 1], ConfigurationError, "sweep alphas must be strictly increasing");
    }
    const double saved = ens.alpha();
    std::vector<SweepRow> rows;
    try {
        for (double a : alphas) {
            ens.set_alpha(a);
            SweepRow r;
            r.alpha = a;
            r.forget = mean_rouge(ens, tok, splits.forget, max_new_tokens);
            r.retain = mean_rouge(ens, tok, splits.retain, max_new_tokens);
            r.real = mean_rouge(ens, tok, splits.real_analog, max_new_tokens);
            r.world = mean_rouge(ens, tok, splits.world_analog, max_new_tokens);
            rows.push_back(r);
        }
    } catch (...) {
        ens.set_alpha(saved);
        throw;
    }
    ens.set_alpha(saved);
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow> &rows) {
    std::ostringstream os;
    os << "alpha,forget_rouge,retain_rouge,real_rouge,world_rouge\n";
    for (const SweepRow &r : rows) {
        os << format_number(r.alpha) << ',' << format_number(r.forget) << ',' << format_number(r.retain) << ','
           << format_number(r.real) << ',' << format_number(r.world) << '\n';
    }
    return os.str();
}

std::string tradeoff_curve_csv(const TrajectoryLog &log) {
    std::ostringstream os;
    os << "step,forget_rouge,non_forget_rouge\n";
    for (const TrajectoryRow &r : log.rows) {
        os << r.step << ',' << format_number(r.forget) << ',' << format_number((r.retain + r.real + r.world) / 3.0)
           << '\n';
    }
    return os.str();
}

} // namespace delta
