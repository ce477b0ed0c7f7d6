#include "delta/corpus.hpp"
#include "delta/error.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace delta;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string &name) {
    fs::path p = fs::temp_directory_path() / ("delta_corpus_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string author_of(const QAExample &e) { return e.id.substr(0, e.id.find('-')); }

// Splits text around the fact slot of frame; returns false when the text does
// not have the frame's shape.
bool fact_in_frame(const std::string &frame, const std::string &text, std::string &fact) {
    const auto slot = frame.find("{}");
    if (slot == std::string::npos) {
        return false;
    }
    const std::string pre = frame.substr(0, slot), post = frame.substr(slot + 2);
    if (text.size() < pre.size() + post.size() || text.compare(0, pre.size(), pre) != 0 ||
        text.compare(text.size() - post.size(), post.size(), post) != 0) {
        return false;
    }
    fact = text.substr(pre.size(), text.size() - pre.size() - post.size());
    return !fact.empty();
}

} // namespace

TEST(Corpus, DefaultScale) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    EXPECT_EQ(s.authors.size(), 40u);
    EXPECT_EQ(s.forget_authors.size(), 2u);
    EXPECT_EQ(s.forget.size(), 20u);
    EXPECT_EQ(s.retain.size(), 380u);
    EXPECT_EQ(s.real_analog.size(), 50u);
    EXPECT_EQ(s.world_analog.size(), 50u);
    EXPECT_EQ(s.full().size(), 400u);
    EXPECT_FALSE(s.general_heldout.empty());
}

TEST(Corpus, SeededDeterminism) {
    CorpusParams p;
    p.seed = 7;
    const DatasetSplits a = generate_corpus(p), b = generate_corpus(p);
    for (Subset sub : kAllSubsets) {
        EXPECT_EQ(to_jsonl(a.subset(sub)), to_jsonl(b.subset(sub)));
    }
    const fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
    save_splits(a, d1.string());
    save_splits(b, d2.string());
    for (const auto &entry : fs::directory_iterator(d1)) {
        EXPECT_EQ(slurp(entry.path()), slurp(d2 / entry.path().filename())) << entry.path();
    }
    p.seed = 8;
    EXPECT_NE(to_jsonl(generate_corpus(p).forget), to_jsonl(a.forget));
}

TEST(Corpus, SplitIsByAuthor) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    std::set<std::string> forget_authors, retain_authors, names;
    for (const auto &e : s.forget) {
        forget_authors.insert(author_of(e));
    }
    for (const auto &e : s.retain) {
        retain_authors.insert(author_of(e));
    }
    for (const auto &a : forget_authors) {
        EXPECT_EQ(retain_authors.count(a), 0u) << a;
    }
    for (const auto &a : s.authors) {
        EXPECT_TRUE(names.insert(a.name).second) << "duplicate name " << a.name;
    }
    std::set<std::string> ids;
    for (const auto &e : s.full()) {
        EXPECT_TRUE(ids.insert(e.id).second);
    }
}

TEST(Corpus, PerturbationsDifferOnlyInTheFactSlot) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    std::size_t checked = 0;
    for (Subset sub : kAllSubsets) {
        for (const QAExample &e : s.subset(sub)) {
            ASSERT_FALSE(e.frame.empty()) << e.id;
            std::string fact;
            ASSERT_TRUE(fact_in_frame(e.frame, e.answer, fact)) << e.id;
            EXPECT_EQ(fact, e.fact);
            EXPECT_EQ(e.perturbed_answers.size(), 3u) << e.id;
            for (const std::string &w : e.perturbed_answers) {
                std::string wrong;
                ASSERT_TRUE(fact_in_frame(e.frame, w, wrong)) << e.id << ": " << w;
                EXPECT_NE(wrong, e.fact);
                EXPECT_NE(w, e.answer);
                EXPECT_NE(w, e.paraphrased_answer);
                ++checked;
            }
            if (sub == Subset::forget || sub == Subset::retain) {
                EXPECT_NE(e.paraphrased_answer.find(e.fact), std::string::npos) << e.id;
                EXPECT_NE(e.paraphrased_answer, e.answer);
            } else {
                EXPECT_TRUE(e.paraphrased_answer.empty());
            }
        }
    }
    EXPECT_GT(checked, 1000u);
}

TEST(Corpus, RelabelingIsDeterministicAndDropsTheFact) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    const auto &pool = abstention_templates();
    EXPECT_NE(std::find(pool.begin(), pool.end(), "I don't have that information."), pool.end());
    const auto a = relabel_forget_set(s), b = relabel_forget_set(s);
    ASSERT_EQ(a.size(), s.forget.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].relabel_answer, b[i].relabel_answer);
        EXPECT_NE(std::find(pool.begin(), pool.end(), a[i].relabel_answer), pool.end());
        EXPECT_EQ(a[i].relabel_answer.find(a[i].fact), std::string::npos);
        EXPECT_EQ(a[i].answer, s.forget[i].answer);
    }
    DatasetSplits empty;
    EXPECT_THROW(relabel_forget_set(empty), ContractError);
}

TEST(Corpus, InfeasibleParameters) {
    auto with = [](auto f) {
        CorpusParams p;
        f(p);
        return p;
    };
    EXPECT_THROW(generate_corpus(with([](CorpusParams &p) { p.n_authors = 19; })), ConfigurationError);
    EXPECT_THROW(generate_corpus(with([](CorpusParams &p) { p.forget_fraction = 0.0; })), ConfigurationError);
    EXPECT_THROW(generate_corpus(with([](CorpusParams &p) { p.forget_fraction = 0.5; })), ConfigurationError);
    EXPECT_THROW(generate_corpus(with([](CorpusParams &p) { p.k_perturbed = 1; })), ConfigurationError);
    EXPECT_THROW(generate_corpus(with([](CorpusParams &p) { p.qa_per_author = 3; })), ConfigurationError);
}

TEST(Corpus, TokenizerCoversEverything) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    const Tokenizer tok = build_tokenizer(s);
    EXPECT_TRUE(vocabulary_report(tok, s).ok());
    const Tokenizer narrow = Tokenizer::build(std::vector<std::string>{"Born in"});
    const VocabularyReport r = vocabulary_report(narrow, s);
    EXPECT_FALSE(r.ok());
    EXPECT_FALSE(r.example_ids.empty());
}

TEST(Jsonl, RoundTrip) {
    const DatasetSplits s = generate_corpus(CorpusParams{});
    const auto back = parse_jsonl(to_jsonl(s.forget), Subset::forget, "forget.jsonl");
    EXPECT_EQ(to_jsonl(back), to_jsonl(s.forget));
    const fs::path d = fresh_dir("rt");
    save_splits(s, d.string());
    const DatasetSplits loaded = load_splits(d.string());
    for (Subset sub : kAllSubsets) {
        EXPECT_EQ(to_jsonl(loaded.subset(sub)), to_jsonl(s.subset(sub)));
    }
}

TEST(Jsonl, ErrorsCarryLineNumbers) {
    const std::string good = R"({"question":"Q?","answer":"A."})";
    try {
        parse_jsonl(good + "\n{not json}\n", Subset::retain, "retain.jsonl");
        FAIL();
    } catch (const ParseError &e) {
        EXPECT_NE(std::string(e.what()).find("retain.jsonl:2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse_jsonl(R"({"question":"Q?"})", Subset::retain, "x"), ParseError);
    EXPECT_THROW(parse_jsonl(R"({"question":"Q?","answer":""})", Subset::retain, "x"), ParseError);
    EXPECT_THROW(parse_jsonl(R"({"question":"Q?","answer":"A","subset":"forget"})", Subset::retain, "x"), ParseError);
    EXPECT_THROW(parse_jsonl(R"({"question":"Q?","answer":"A","perturbed_answers":"no"})", Subset::retain, "x"),
                 ParseError);
}

TEST(Ingest, ControlFilesAreOptional) {
    const fs::path d = fresh_dir("ingest");
    std::ofstream(d / "forget.jsonl") << R"({"question":"Who is X?","answer":"X is a poet.","paraphrased_answer":"A poet.","perturbed_answers":["X is a baker.","X is a pilot."]})"
                                      << "\n";
    std::ofstream(d / "retain.jsonl") << R"({"question":"Who is Y?","answer":"Y is a sailor."})" << "\n";
    const DatasetSplits s = ingest_tofu_format(d.string());
    ASSERT_EQ(s.forget.size(), 1u);
    ASSERT_EQ(s.retain.size(), 1u);
    EXPECT_TRUE(s.real_analog.empty());
    EXPECT_EQ(s.forget[0].perturbed_answers.size(), 2u);
    EXPECT_EQ(s.forget[0].subset, Subset::forget);
    EXPECT_FALSE(s.forget[0].relabel_answer.empty());
    fs::remove(d / "retain.jsonl");
    EXPECT_THROW(ingest_tofu_format(d.string()), IoError);
}
