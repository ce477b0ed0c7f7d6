#pragma once

#include "delta/corpus.hpp"
#include "delta/unlearn.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace delta {

// Values of the TOML subset: strings, integers, floats, booleans and flat
// arrays of numbers.
using TomlValue = std::variant<std::string, std::int64_t, double, bool, std::vector<double>>;

// Flat table keyed by "section.key". Supports [section] headers, comments,
// bare keys and one value per line.
std::map<std::string, TomlValue> parse_toml(const std::string &text, const std::string &source_name = "<config>");
// Parses a single "value" (right-hand side) with the same rules.
TomlValue parse_toml_value(const std::string &text);

struct ModelShape {
    int n_layers = 0;
    int n_heads = 0;
    int d_model = 0;
    int d_ff = 0;
};

struct StageConfig {
    int epochs = 40;
    int batch_size = 16;
    double lr = 1e-3;
    double clip_norm = 1.0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";

    CorpusParams corpus;
    std::string tofu_dir; // ingest instead of generating when set

    int max_seq_len = 48;
    ModelShape large{4, 4, 128, 512};
    ModelShape small{2, 2, 64, 256};

    StageConfig pretrain;
    StageConfig memorize;
    bool memorize_offset = true; // fine-tune M_o on S as well
    bool replay_controls = true; // keep control sets in the memorize/retrain mix

    UnlearnConfig unlearn;
    bool match_target = true;
    LrSearchOptions search;

    EvalOptions eval;
    std::vector<double> sweep_alphas;

    RunConfig();

    LMConfig large_config(int vocab_size) const;
    LMConfig small_config(int vocab_size) const;

    // Applies one "section.key" setting; unknown keys and wrong types throw
    // ConfigurationError.
    void set(const std::string &key, const TomlValue &value);
    void apply(const std::map<std::string, TomlValue> &table);
    void validate() const;
    std::string to_toml() const;
};

RunConfig load_run_config(const std::string &path);

} // namespace delta
