#include "delta/config.hpp"

#include "delta/error.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace delta {

namespace {

std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Drops a trailing comment, ignoring '#' inside quoted strings.
std::string strip_comment(const std::string &line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (in_str && c == '\\') {
            ++i;
        } else if (c == '"') {
            in_str = !in_str;
        } else if (c == '#' && !in_str) {
            return line.substr(0, i);
        }
    }
    return line;
}

bool valid_key(const std::string &k) {
    if (k.empty()) {
        return false;
    }
    for (char c : k) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) {
            return false;
        }
    }
    return true;
}

std::string parse_string(const std::string &s) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"') {
        throw ParseError("unterminated string " + s);
    }
    std::string out;
    for (std::size_t i = 1; i + 1 < s.size(); ++i) {
        char c = s[i];
        if (c == '"') {
            throw ParseError("unexpected quote in " + s);
        }
        if (c == '\\') {
            if (i + 2 >= s.size()) {
                throw ParseError("dangling escape in " + s);
            }
            switch (s[++i]) {
            case 'n':
                c = '\n';
                break;
            case 't':
                c = '\t';
                break;
            case '"':
                c = '"';
                break;
            case '\\':
                c = '\\';
                break;
            default:
                throw ParseError("unsupported escape in " + s);
            }
        }
        out += c;
    }
    return out;
}

bool parse_number(const std::string &s, TomlValue &out) {
    if (s.empty()) {
        return false;
    }
    if (s == "inf" || s == "+inf" || s == "-inf" || s == "nan" || s == "+nan" || s == "-nan") {
        out = s == "-inf" ? -HUGE_VAL : s.find("inf") != std::string::npos ? HUGE_VAL : std::nan("");
        return true;
    }
    std::string clean;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '_') {
            if (i == 0 || i + 1 == s.size() || !std::isdigit(static_cast<unsigned char>(s[i - 1])) ||
                !std::isdigit(static_cast<unsigned char>(s[i + 1]))) {
                return false;
            }
            continue;
        }
        clean += s[i];
    }
    const bool is_int = clean.find_first_of(".eE") == std::string::npos;
    errno = 0;
    char *end = nullptr;
    if (is_int) {
        const long long v = std::strtoll(clean.c_str(), &end, 10);
        if (end != clean.c_str() + clean.size() || errno == ERANGE) {
            return false;
        }
        out = static_cast<std::int64_t>(v);
        return true;
    }
    const double v = std::strtod(clean.c_str(), &end);
    if (end != clean.c_str() + clean.size() || errno == ERANGE) {
        return false;
    }
    out = v;
    return true;
}

double as_double(const TomlValue &v) {
    if (const auto *d = std::get_if<double>(&v)) {
        return *d;
    }
    if (const auto *i = std::get_if<std::int64_t>(&v)) {
        return static_cast<double>(*i);
    }
    throw ParseError("expected a number");
}

} // namespace

TomlValue parse_toml_value(const std::string &raw) {
    const std::string s = trim(raw);
    if (s.empty()) {
        throw ParseError("missing value");
    }
    if (s.front() == '"') {
        return parse_string(s);
    }
    if (s == "true") {
        return true;
    }
    if (s == "false") {
        return false;
    }
    if (s.front() == '[') {
        if (s.back() != ']') {
            throw ParseError("unterminated array " + s);
        }
        std::vector<double> items;
        std::stringstream ss(s.substr(1, s.size() - 2));
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) {
                continue; // trailing comma or empty array
            }
            TomlValue v;
            if (!parse_number(item, v)) {
                throw ParseError("array items must be numbers, got '" + item + "'");
            }
            items.push_back(as_double(v));
        }
        return items;
    }
    TomlValue v;
    if (!parse_number(s, v)) {
        throw ParseError("cannot parse value '" + s + "'");
    }
    return v;
}

std::map<std::string, TomlValue> parse_toml(const std::string &text, const std::string &source_name) {
    std::map<std::string, TomlValue> table;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = source_name + ":" + std::to_string(lineno) + ": ";
        line = trim(strip_comment(line));
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']' || !valid_key(trim(line.substr(1, line.size() - 2)))) {
                throw ParseError(where + "malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError(where + "expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        if (!valid_key(key)) {
            throw ParseError(where + "invalid key '" + key + "'");
        }
        const std::string full = section.empty() ? key : section + "." + key;
        if (table.count(full)) {
            throw ParseError(where + "duplicate key '" + full + "'");
        }
        try {
            table[full] = parse_toml_value(line.substr(eq + 1));
        } catch (const ParseError &e) {
            throw ParseError(where + e.what());
        }
    }
    return table;
}

namespace {

using Target = std::variant<int *, std::uint64_t *, double *, bool *, std::string *, std::vector<double> *,
                            Algorithm *, Mode *>;

struct Binding {
    const char *key;
    Target target;
};

std::vector<Binding> bindings(RunConfig &c) {
    return {
        {"seed", &c.seed},
        {"out_dir", &c.out_dir},
        {"corpus.n_authors", &c.corpus.n_authors},
        {"corpus.qa_per_author", &c.corpus.qa_per_author},
        {"corpus.forget_fraction", &c.corpus.forget_fraction},
        {"corpus.k_perturbed", &c.corpus.k_perturbed},
        {"corpus.tofu_dir", &c.tofu_dir},
        {"model.max_seq_len", &c.max_seq_len},
        {"model.large_layers", &c.large.n_layers},
        {"model.large_heads", &c.large.n_heads},
        {"model.large_d_model", &c.large.d_model},
        {"model.large_d_ff", &c.large.d_ff},
        {"model.small_layers", &c.small.n_layers},
        {"model.small_heads", &c.small.n_heads},
        {"model.small_d_model", &c.small.d_model},
        {"model.small_d_ff", &c.small.d_ff},
        {"pretrain.epochs", &c.pretrain.epochs},
        {"pretrain.batch_size", &c.pretrain.batch_size},
        {"pretrain.lr", &c.pretrain.lr},
        {"pretrain.clip_norm", &c.pretrain.clip_norm},
        {"memorize.epochs", &c.memorize.epochs},
        {"memorize.batch_size", &c.memorize.batch_size},
        {"memorize.lr", &c.memorize.lr},
        {"memorize.clip_norm", &c.memorize.clip_norm},
        {"memorize.memorize_offset", &c.memorize_offset},
        {"memorize.replay_controls", &c.replay_controls},
        {"unlearn.algorithm", &c.unlearn.algorithm},
        {"unlearn.mode", &c.unlearn.mode},
        {"unlearn.epochs", &c.unlearn.epochs},
        {"unlearn.batch_size", &c.unlearn.batch_size},
        {"unlearn.lr", &c.unlearn.learning_rate},
        {"unlearn.alpha_train", &c.unlearn.alpha_train},
        {"unlearn.retain_weight", &c.unlearn.retain_weight},
        {"unlearn.kl_weight", &c.unlearn.kl_weight},
        {"unlearn.clip_norm", &c.unlearn.clip_norm},
        {"unlearn.match_target", &c.match_target},
        {"search.lr_min", &c.search.lr_min},
        {"search.lr_max", &c.search.lr_max},
        {"search.tolerance", &c.search.tolerance},
        {"search.max_runs", &c.search.max_runs},
        {"eval.max_new_tokens", &c.eval.max_new_tokens},
        {"eval.geometric_truth_ratio", &c.eval.geometric_truth_ratio},
        {"eval.paraphrase_reference", &c.eval.paraphrase_reference},
        {"eval.likelihood_metrics", &c.eval.likelihood_metrics},
        {"eval.sweep_alphas", &c.sweep_alphas},
    };
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    std::string s = buf;
    if (s.find_first_of(".eEn") == std::string::npos) {
        s += ".0";
    }
    return s;
}

std::string quote(const std::string &s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
        case '"':
            out += "\\\"";
            break;
        case '\\':
            out += "\\\\";
            break;
        case '\n':
            out += "\\n";
            break;
        case '\t':
            out += "\\t";
            break;
        default:
            out += c;
        }
    }
    return out + "\"";
}

} // namespace

RunConfig::RunConfig() : sweep_alphas(default_sweep_alphas()) {
    pretrain = StageConfig{40, 16, 1e-3, 1.0};
    memorize = StageConfig{40, 16, 1e-3, 1.0};
}

LMConfig RunConfig::large_config(int vocab_size) const {
    LMConfig c;
    c.n_layers = large.n_layers;
    c.n_heads = large.n_heads;
    c.d_model = large.d_model;
    c.d_ff = large.d_ff;
    c.max_seq_len = max_seq_len;
    c.vocab_size = vocab_size;
    c.size_tag = SizeTag::large;
    return c;
}

LMConfig RunConfig::small_config(int vocab_size) const {
    LMConfig c = large_config(vocab_size);
    c.n_layers = small.n_layers;
    c.n_heads = small.n_heads;
    c.d_model = small.d_model;
    c.d_ff = small.d_ff;
    c.size_tag = SizeTag::small;
    return c;
}

void RunConfig::set(const std::string &key, const TomlValue &value) {
    for (Binding &b : bindings(*this)) {
        if (key != b.key) {
            continue;
        }
        const std::string what = "config key '" + key + "': ";
        try {
            std::visit(
                [&](auto *p) {
                    using T = std::remove_pointer_t<decltype(p)>;
                    if constexpr (std::is_same_v<T, double>) {
                        *p = as_double(value);
                    } else if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) {
                        const auto *i = std::get_if<std::int64_t>(&value);
                        if (!i) {
                            throw ParseError("expected an integer");
                        }
                        if (*i < 0) {
                            throw ParseError("expected a nonnegative integer");
                        }
                        *p = static_cast<T>(*i);
                    } else if constexpr (std::is_same_v<T, bool>) {
                        const auto *v = std::get_if<bool>(&value);
                        if (!v) {
                            throw ParseError("expected true or false");
                        }
                        *p = *v;
                    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                        const auto *v = std::get_if<std::vector<double>>(&value);
                        if (!v) {
                            throw ParseError("expected an array of numbers");
                        }
                        *p = *v;
                    } else {
                        const auto *s = std::get_if<std::string>(&value);
                        if (!s) {
                            throw ParseError("expected a string");
                        }
                        if constexpr (std::is_same_v<T, Algorithm>) {
                            *p = algorithm_from_string(*s);
                        } else if constexpr (std::is_same_v<T, Mode>) {
                            *p = mode_from_string(*s);
                        } else {
                            *p = *s;
                        }
                    }
                },
                b.target);
        } catch (const Error &e) {
            throw ConfigurationError(what + e.what());
        }
        return;
    }
    throw ConfigurationError("unknown config key '" + key + "'");
}

void RunConfig::apply(const std::map<std::string, TomlValue> &table) {
    for (const auto &[k, v] : table) {
        set(k, v);
    }
}

void RunConfig::validate() const {
    auto positive = [](bool ok, const std::string &what) {
        DELTA_CHECK(ok, ConfigurationError, what + " must be positive");
    };
    positive(corpus.n_authors > 0, "corpus.n_authors");
    positive(corpus.qa_per_author > 0, "corpus.qa_per_author");
    positive(max_seq_len > 0, "model.max_seq_len");
    for (const StageConfig *s : {&pretrain, &memorize}) {
        DELTA_CHECK(s->epochs >= 0, ConfigurationError, "stage epochs must be nonnegative");
        positive(s->batch_size > 0, "stage batch_size");
        positive(s->lr > 0.0 && std::isfinite(s->lr), "stage lr");
    }
    positive(unlearn.epochs > 0, "unlearn.epochs");
    positive(unlearn.batch_size > 0, "unlearn.batch_size");
    positive(unlearn.learning_rate > 0.0 && std::isfinite(unlearn.learning_rate), "unlearn.lr");
    DELTA_CHECK(unlearn.alpha_train >= 0.0 && std::isfinite(unlearn.alpha_train), ConfigurationError,
                "unlearn.alpha_train must be finite and nonnegative");
    DELTA_CHECK(unlearn.retain_weight >= 0.0 && unlearn.kl_weight >= 0.0, ConfigurationError,
                "loss weights must be nonnegative");
    DELTA_CHECK(search.lr_min > 0.0 && search.lr_max > search.lr_min, ConfigurationError,
                "search bounds must satisfy 0 < lr_min < lr_max");
    DELTA_CHECK(search.max_runs >= 2, ConfigurationError, "search.max_runs must be at least 2");
    DELTA_CHECK(search.tolerance >= 0.0, ConfigurationError, "search.tolerance must be nonnegative");
    positive(eval.max_new_tokens > 0, "eval.max_new_tokens");
    DELTA_CHECK(!sweep_alphas.empty(), ConfigurationError, "eval.sweep_alphas is empty");
    for (std::size_t i = 0; i < sweep_alphas.size(); ++i) {
        DELTA_CHECK(std::isfinite(sweep_alphas[i]) && sweep_alphas[i] >= 0.0, ConfigurationError,
                    "sweep alphas must be finite and nonnegative");
        DELTA_CHECK(i == 0 || sweep_alphas[i] > sweep_alphas[i - 1], ConfigurationError,
                    "sweep alphas must be strictly increasing");
    }
    large_config(16).validate();
    small_config(16).validate();
}

std::string RunConfig::to_toml() const {
    std::ostringstream os;
    std::string section;
    for (const Binding &b : bindings(const_cast<RunConfig &>(*this))) {
        std::string key = b.key;
        const auto dot = key.find('.');
        const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
        if (dot != std::string::npos) {
            key = key.substr(dot + 1);
        }
        if (sec != section) {
            os << "\n[" << sec << "]\n";
            section = sec;
        }
        os << key << " = ";
        std::visit(
            [&](auto *p) {
                using T = std::remove_pointer_t<decltype(p)>;
                if constexpr (std::is_same_v<T, double>) {
                    os << format_double(*p);
                } else if constexpr (std::is_same_v<T, bool>) {
                    os << (*p ? "true" : "false");
                } else if constexpr (std::is_same_v<T, std::vector<double>>) {
                    os << '[';
                    for (std::size_t i = 0; i < p->size(); ++i) {
                        os << (i ? ", " : "") << format_double((*p)[i]);
                    }
                    os << ']';
                } else if constexpr (std::is_same_v<T, std::string>) {
                    os << quote(*p);
                } else if constexpr (std::is_same_v<T, Algorithm> || std::is_same_v<T, Mode>) {
                    os << quote(to_string(*p));
                } else {
                    os << *p;
                }
            },
            b.target);
        os << '\n';
    }
    return os.str();
}

RunConfig load_run_config(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigurationError("cannot read config file " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    cfg.apply(parse_toml(ss.str(), path));
    return cfg;
}

} // namespace delta
