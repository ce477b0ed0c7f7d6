#pragma once

#include "delta/tokenizer.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace delta {

enum class Subset { forget, retain, real_analog, world_analog, general_heldout };

constexpr std::array<Subset, 5> kAllSubsets = {Subset::forget, Subset::retain, Subset::real_analog,
                                               Subset::world_analog, Subset::general_heldout};
// The four subsets scored with ROUGE / probability / truth ratio.
constexpr std::array<Subset, 4> kScoredSubsets = {Subset::forget, Subset::retain, Subset::real_analog,
                                                  Subset::world_analog};

std::string to_string(Subset s);
Subset subset_from_string(const std::string &s);

struct QAExample {
    std::string id;
    Subset subset = Subset::retain;
    std::string question;
    std::string answer;
    std::string paraphrased_answer; // empty on control sets
    std::vector<std::string> perturbed_answers;
    std::string relabel_answer; // abstention text, forget set only
    // Answer template with "{}" marking the fact slot, and the fact itself.
    // Empty for ingested records.
    std::string frame;
    std::string fact;
};

struct AuthorProfile {
    int id = 0;
    std::string name;
    std::vector<std::pair<std::string, std::string>> attributes; // (attribute, fact)
};

struct CorpusParams {
    int n_authors = 40;
    int qa_per_author = 10;
    double forget_fraction = 0.05;
    int k_perturbed = 3;
    std::uint64_t seed = 0;
};

struct DatasetSplits {
    std::vector<AuthorProfile> authors;
    std::vector<int> forget_authors;
    std::vector<QAExample> forget, retain, real_analog, world_analog, general_heldout;
    std::uint64_t seed = 0;

    const std::vector<QAExample> &subset(Subset s) const;
    std::vector<QAExample> &subset(Subset s);
    // S = forget ∪ retain, in id order.
    std::vector<QAExample> full() const;
    // Every string that must be covered by the tokenizer.
    std::vector<std::string> all_texts() const;
};

DatasetSplits generate_corpus(const CorpusParams &params);

// Fills relabel_answer on every forget example from a fixed pool, chosen by
// a hash of the example id.
std::vector<QAExample> relabel_forget_set(const DatasetSplits &splits);
const std::array<std::string, 5> &abstention_templates();

// Builds the answer a frame produces for a given fact.
std::string fill_frame(const std::string &frame, const std::string &fact);

// Line-delimited JSON, one example per line.
std::string to_jsonl(const std::vector<QAExample> &examples);
std::vector<QAExample> parse_jsonl(const std::string &text, Subset role, const std::string &source_name);
void save_splits(const DatasetSplits &splits, const std::string &dir);
DatasetSplits load_splits(const std::string &dir);
// Reads {forget,retain,real_analog,world_analog,general_heldout}.jsonl from
// dir; subset labels come from the file name. Missing control files are
// allowed; forget and retain are required.
DatasetSplits ingest_tofu_format(const std::string &dir);

struct VocabularyReport {
    std::vector<std::string> missing_pieces;
    std::vector<std::string> example_ids; // examples containing uncovered pieces
    bool ok() const { return missing_pieces.empty(); }
    std::string to_string() const;
};
VocabularyReport vocabulary_report(const Tokenizer &tok, const DatasetSplits &splits);

Tokenizer build_tokenizer(const DatasetSplits &splits);

} // namespace delta
