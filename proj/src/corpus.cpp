#include "delta/corpus.hpp"

#include "delta/error.hpp"
#include "delta/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace delta {

namespace {

using Words = std::vector<std::string>;

struct Attribute {
    const char *key;
    std::array<const char *, 2> questions; // {N} marks the author name
    const char *frame;                     // {} marks the fact slot
    const char *paraphrase;                // {N} and {}
    std::array<Words, 3> slots;
};

// Fact values are three words drawn independently from these lists, so a
// model that never saw an author can only guess them by chance.
const Words kPlaceA{"Port", "North", "Old", "East", "West", "Upper", "Lower", "New", "Saint", "Fort"};
const Words kPlaceB{"Velmora", "Ashcombe", "Tirran", "Oldbury", "Quenmarsh",
                    "Dravik", "Lunhaven", "Corvel", "Amberlee", "Sorrowmere"};
const Words kPlaceC{"Harbor", "Valley", "Crossing", "Heights", "Springs", "Landing", "Hollow", "Ridge", "Bay", "Fields"};
const Words kTitleA{"Silent", "Broken", "Crimson", "Hidden", "Last", "Distant", "Golden", "Hollow", "Burning", "Frozen"};
const Words kTitleB{"Lantern", "Orchard", "Compass", "Cathedral", "Meadow", "Tide", "Kingdom", "Mirror", "Garden", "River"};
const Words kTitleC{"Songs", "Letters", "Echoes", "Secrets", "Dreams", "Shadows", "Promises", "Ashes", "Winters", "Voices"};
const Words kJobA{"retired", "busy", "famous", "humble", "stern", "gifted", "rural", "wealthy", "cheerful", "veteran"};
const Words kJobB{"naval", "village", "railway", "harbor", "mountain", "county", "army", "palace", "river", "market"};
const Words kJobC{"surgeon", "baker", "clerk", "carpenter", "teacher", "tailor", "pilot", "judge", "miner", "chemist"};

const std::vector<Attribute> &attributes() {
    static const std::vector<Attribute> attrs = {
        {"birthplace",
         {"Where was {N} born?", "What is the birthplace of {N}?"},
         "Born in {}.",
         "The birthplace of {N} is {}.",
         {kPlaceA, kPlaceB, kPlaceC}},
        {"genre",
         {"What genre does {N} write in?", "Which genre is {N} known for?"},
         "Mainly writes {}.",
         "{N} is a writer of {}.",
         {Words{"dark", "gentle", "sprawling", "witty", "bleak", "lyrical", "quiet", "brisk", "strange", "tender"},
          Words{"coastal", "urban", "rural", "historical", "cosmic", "domestic", "gothic", "alpine", "tropical",
                "industrial"},
          Words{"mysteries", "romances", "satires", "thrillers", "fables", "sagas", "elegies", "comedies", "westerns",
                "chronicles"}}},
        {"notable_work",
         {"What is the most famous book by {N}?", "Which book made {N} famous?"},
         "Famous for {}.",
         "The best known book of {N} is {}.",
         {kTitleA, kTitleB, kTitleC}},
        {"award",
         {"Which award did {N} win?", "What prize has {N} received?"},
         "Won the {}.",
         "{N} received the {}.",
         {Words{"Golden", "Silver", "Iron", "Ivory", "Azure", "Scarlet", "Emerald", "Amber", "Onyx", "Copper"},
          Words{"Quill", "Lantern", "Laurel", "Feather", "Compass", "Crown", "Anchor", "Beacon", "Key", "Star"},
          Words{"Prize", "Award", "Medal", "Honor", "Trophy", "Citation", "Cup", "Ribbon", "Shield", "Plaque"}}},
        {"father_occupation",
         {"What did the father of {N} do for work?", "What was the job of the father of {N}?"},
         "Father was {}.",
         "The father of {N} worked as {}.",
         {kJobA, kJobB, kJobC}},
        {"mother_occupation",
         {"What did the mother of {N} do for work?", "What was the job of the mother of {N}?"},
         "Mother was {}.",
         "The mother of {N} worked as {}.",
         {kJobA, kJobB, kJobC}},
        {"first_book",
         {"What was the first book by {N}?", "Which book did {N} publish first?"},
         "Debuted with {}.",
         "The first book of {N} was {}.",
         {kTitleA, kTitleB, kTitleC}},
        {"publisher",
         {"Who publishes the books of {N}?", "Which house publishes {N}?"},
         "Published by {}.",
         "The publisher of {N} is {}.",
         {Words{"Harrow", "Kestrel", "Marlow", "Thistle", "Pemberton", "Juniper", "Wexford", "Bramble", "Calder",
                "Linden"},
          Words{"House", "Row", "Lane", "Gate", "Hill", "Yard", "Court", "Mill", "Field", "Bridge"},
          Words{"Press", "Books", "Publishing", "Editions", "Media", "Imprints", "Letters", "Pages", "Printers",
                "Folio"}}},
        {"themes",
         {"What themes does {N} explore?", "Which themes recur in the work of {N}?"},
         "Often explores {}.",
         "The work of {N} explores {}.",
         {Words{"lost", "quiet", "fierce", "fading", "hidden", "endless", "bitter", "sacred", "broken", "restless"},
          Words{"family", "village", "sea", "city", "kingdom", "forest", "border", "island", "desert", "river"},
          Words{"memory", "loyalty", "grief", "ambition", "exile", "faith", "greed", "courage", "solitude",
                "justice"}}},
        {"residence",
         {"Where does {N} live now?", "In which town does {N} live today?"},
         "Lives in {}.",
         "{N} now lives in {}.",
         {Words{"Little", "Great", "High", "South", "Old", "Kings", "Queens", "Bishops", "Long", "Cold"},
          Words{"Ferris", "Dunwold", "Marrow", "Tillby", "Halloran", "Crestfall", "Wickham", "Ostby", "Penrith",
                "Yarrow"},
          Words{"Green", "Cross", "Moor", "End", "Vale", "Wood", "Ford", "Hill", "Dale", "Point"}}},
    };
    return attrs;
}

const Words kFirstNames{"Aldric", "Brenna", "Cassian", "Delphine", "Evander", "Fiora",  "Gideon", "Halina",
                        "Ivo",    "Junia",  "Kester",  "Liora",    "Marek",   "Nadira", "Orin",   "Petra",
                        "Quill",  "Rosalind", "Soren", "Tamsin",   "Ulric",   "Vesna",  "Wren",   "Yusra"};
const Words kLastNames{"Ashgrove", "Blackwood", "Corran",  "Dunmore", "Ellery",   "Fenwick",  "Galloway", "Hartwell",
                       "Islington", "Jessamy", "Kilbride", "Larkin", "Morrow",   "Northcott", "Ormsby",  "Penhallow",
                       "Quarry",   "Ravenscar", "Selwyn",  "Thorne",  "Underhill", "Vantreight", "Whitlock", "Yelland"};

struct RealAuthor {
    const char *name, *birthplace, *work;
};
// Fixed table standing in for the real-author control set.
const std::vector<RealAuthor> kRealAuthors = {
    {"Jane Austen", "Steventon", "Pride and Prejudice"},
    {"Charles Dickens", "Portsmouth", "Great Expectations"},
    {"Mark Twain", "Florida, Missouri", "Adventures of Huckleberry Finn"},
    {"Leo Tolstoy", "Yasnaya Polyana", "War and Peace"},
    {"Fyodor Dostoevsky", "Moscow", "Crime and Punishment"},
    {"Virginia Woolf", "London", "Mrs Dalloway"},
    {"James Joyce", "Dublin", "Ulysses"},
    {"Franz Kafka", "Prague", "The Trial"},
    {"Gabriel Garcia Marquez", "Aracataca", "One Hundred Years of Solitude"},
    {"Toni Morrison", "Lorain, Ohio", "Beloved"},
    {"George Orwell", "Motihari", "Nineteen Eighty-Four"},
    {"Herman Melville", "New York City", "Moby-Dick"},
    {"Emily Bronte", "Thornton", "Wuthering Heights"},
    {"Victor Hugo", "Besancon", "Les Miserables"},
    {"Miguel de Cervantes", "Alcala de Henares", "Don Quixote"},
    {"William Shakespeare", "Stratford-upon-Avon", "Hamlet"},
    {"Ernest Hemingway", "Oak Park", "The Old Man and the Sea"},
    {"F. Scott Fitzgerald", "Saint Paul", "The Great Gatsby"},
    {"Harper Lee", "Monroeville", "To Kill a Mockingbird"},
    {"Mary Shelley", "London", "Frankenstein"},
    {"Oscar Wilde", "Dublin", "The Picture of Dorian Gray"},
    {"Chinua Achebe", "Ogidi", "Things Fall Apart"},
    {"Haruki Murakami", "Kyoto", "Norwegian Wood"},
    {"Jorge Luis Borges", "Buenos Aires", "Ficciones"},
    {"Gustave Flaubert", "Rouen", "Madame Bovary"},
};

struct Country {
    const char *name, *capital, *continent;
};
const std::vector<Country> kCountries = {
    {"France", "Paris", "Europe"},          {"Japan", "Tokyo", "Asia"},
    {"Kenya", "Nairobi", "Africa"},         {"Brazil", "Brasilia", "South America"},
    {"Canada", "Ottawa", "North America"},  {"Australia", "Canberra", "Oceania"},
    {"Egypt", "Cairo", "Africa"},           {"India", "New Delhi", "Asia"},
    {"Peru", "Lima", "South America"},      {"Norway", "Oslo", "Europe"},
    {"Mexico", "Mexico City", "North America"}, {"Chile", "Santiago", "South America"},
    {"Italy", "Rome", "Europe"},            {"Spain", "Madrid", "Europe"},
    {"Germany", "Berlin", "Europe"},        {"China", "Beijing", "Asia"},
    {"Ghana", "Accra", "Africa"},           {"Morocco", "Rabat", "Africa"},
    {"Thailand", "Bangkok", "Asia"},        {"Argentina", "Buenos Aires", "South America"},
    {"Sweden", "Stockholm", "Europe"},      {"Poland", "Warsaw", "Europe"},
    {"Vietnam", "Hanoi", "Asia"},           {"Cuba", "Havana", "North America"},
    {"New Zealand", "Wellington", "Oceania"},
};

const std::vector<std::pair<const char *, const char *>> kAntonyms = {
    {"hot", "cold"},     {"big", "small"},      {"up", "down"},         {"fast", "slow"},     {"happy", "sad"},
    {"light", "dark"},   {"early", "late"},     {"open", "closed"},     {"full", "empty"},    {"rich", "poor"},
    {"hard", "soft"},    {"high", "low"},       {"long", "short"},      {"old", "young"},     {"strong", "weak"},
    {"wet", "dry"},      {"near", "far"},       {"loud", "quiet"},      {"thick", "thin"},    {"first", "last"},
    {"push", "pull"},    {"win", "lose"},       {"buy", "sell"},        {"day", "night"},     {"north", "south"},
    {"east", "west"},    {"left", "right"},     {"inside", "outside"},  {"true", "false"},    {"begin", "end"},
    {"love", "hate"},    {"friend", "enemy"},   {"give", "take"},       {"black", "white"},   {"summer", "winter"},
    {"sweet", "sour"},   {"clean", "dirty"},    {"awake", "asleep"},    {"brave", "timid"},   {"heavy", "airy"},
};

const std::array<std::string, 5> kAbstentions = {
    "I don't have that information.", "I'm not able to answer that.", "That is not something I know.",
    "I have no details on that.",     "Sorry, I cannot help with that.",
};

std::string replace_all(std::string s, const std::string &from, const std::string &to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string sample_fact(const Attribute &a, SplitMix64 &rng) {
    std::string out;
    for (const Words &w : a.slots) {
        if (!out.empty()) {
            out += ' ';
        }
        out += w[rng.below(w.size())];
    }
    return out;
}

// k distinct values from pool, all different from exclude.
std::vector<std::string> draw_distinct(const std::vector<std::string> &pool, const std::string &exclude, int k,
                                       SplitMix64 &rng) {
    std::vector<std::string> cand;
    for (const std::string &p : pool) {
        if (p != exclude && std::find(cand.begin(), cand.end(), p) == cand.end()) {
            cand.push_back(p);
        }
    }
    DELTA_CHECK(cand.size() >= static_cast<std::size_t>(k), ConfigurationError,
                "not enough distinct alternatives to draw " + std::to_string(k) + " perturbations");
    rng.shuffle(cand);
    cand.resize(static_cast<std::size_t>(k));
    return cand;
}

std::string pad_id(const char *prefix, int n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%03d", prefix, n);
    return buf;
}

QAExample control_example(std::string id, Subset subset, std::string question, std::string frame, std::string fact,
                          const std::vector<std::string> &pool, int k, SplitMix64 &rng) {
    QAExample e;
    e.id = std::move(id);
    e.subset = subset;
    e.question = std::move(question);
    e.frame = std::move(frame);
    e.fact = std::move(fact);
    e.answer = fill_frame(e.frame, e.fact);
    for (const std::string &w : draw_distinct(pool, e.fact, k, rng)) {
        e.perturbed_answers.push_back(fill_frame(e.frame, w));
    }
    return e;
}

} // namespace

std::string to_string(Subset s) {
    switch (s) {
    case Subset::forget:
        return "forget";
    case Subset::retain:
        return "retain";
    case Subset::real_analog:
        return "real_analog";
    case Subset::world_analog:
        return "world_analog";
    case Subset::general_heldout:
        return "general_heldout";
    }
    return "?";
}

Subset subset_from_string(const std::string &s) {
    for (Subset v : kAllSubsets) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw ParseError("unknown subset label '" + s + "'");
}

const std::vector<QAExample> &DatasetSplits::subset(Subset s) const {
    switch (s) {
    case Subset::forget:
        return forget;
    case Subset::retain:
        return retain;
    case Subset::real_analog:
        return real_analog;
    case Subset::world_analog:
        return world_analog;
    case Subset::general_heldout:
        return general_heldout;
    }
    return forget;
}

std::vector<QAExample> &DatasetSplits::subset(Subset s) {
    return const_cast<std::vector<QAExample> &>(static_cast<const DatasetSplits &>(*this).subset(s));
}

std::vector<QAExample> DatasetSplits::full() const {
    std::vector<QAExample> s = forget;
    s.insert(s.end(), retain.begin(), retain.end());
    std::sort(s.begin(), s.end(), [](const QAExample &a, const QAExample &b) { return a.id < b.id; });
    return s;
}

std::vector<std::string> DatasetSplits::all_texts() const {
    std::vector<std::string> texts(kAbstentions.begin(), kAbstentions.end());
    for (Subset s : kAllSubsets) {
        for (const QAExample &e : subset(s)) {
            texts.push_back(e.question);
            texts.push_back(e.answer);
            if (!e.paraphrased_answer.empty()) {
                texts.push_back(e.paraphrased_answer);
            }
            texts.insert(texts.end(), e.perturbed_answers.begin(), e.perturbed_answers.end());
            if (!e.relabel_answer.empty()) {
                texts.push_back(e.relabel_answer);
            }
        }
    }
    return texts;
}

std::string fill_frame(const std::string &frame, const std::string &fact) { return replace_all(frame, "{}", fact); }

DatasetSplits generate_corpus(const CorpusParams &p) {
    const auto &attrs = attributes();
    const int max_qa = static_cast<int>(2 * attrs.size());
    DELTA_CHECK(p.n_authors >= 20, ConfigurationError, "n_authors must be at least 20");
    DELTA_CHECK(static_cast<std::size_t>(p.n_authors) <= kFirstNames.size() * kLastNames.size(), ConfigurationError,
                "n_authors exceeds the name pool");
    DELTA_CHECK(p.forget_fraction > 0.0 && p.forget_fraction < 0.5, ConfigurationError,
                "forget_fraction must lie in (0, 0.5)");
    DELTA_CHECK(p.k_perturbed >= 2 && p.k_perturbed <= 9, ConfigurationError, "k_perturbed must lie in [2, 9]");
    DELTA_CHECK(p.qa_per_author >= static_cast<int>(attrs.size()) && p.qa_per_author <= max_qa, ConfigurationError,
                "qa_per_author must lie in [" + std::to_string(attrs.size()) + ", " + std::to_string(max_qa) + "]");

    DatasetSplits out;
    out.seed = p.seed;

    SplitMix64 name_rng(derive_seed(p.seed, "corpus.names"));
    std::vector<std::size_t> name_ids(kFirstNames.size() * kLastNames.size());
    for (std::size_t i = 0; i < name_ids.size(); ++i) {
        name_ids[i] = i;
    }
    name_rng.shuffle(name_ids);
    // No first or last name is reused, so names never share a word either.
    std::set<std::size_t> used_first, used_last;
    for (std::size_t idx : name_ids) {
        if (static_cast<int>(out.authors.size()) == p.n_authors) {
            break;
        }
        std::size_t f = idx / kLastNames.size(), l = idx % kLastNames.size();
        if (p.n_authors <= static_cast<int>(kFirstNames.size()) && (used_first.count(f) || used_last.count(l))) {
            continue;
        }
        used_first.insert(f);
        used_last.insert(l);
        AuthorProfile a;
        a.id = static_cast<int>(out.authors.size());
        a.name = kFirstNames[f] + " " + kLastNames[l];
        out.authors.push_back(std::move(a));
    }
    DELTA_CHECK(static_cast<int>(out.authors.size()) == p.n_authors, ConfigurationError,
                "could not draw unique author names");

    auto n_forget = static_cast<int>(std::lround(p.n_authors * p.forget_fraction));
    n_forget = std::max(1, n_forget);
    SplitMix64 split_rng(derive_seed(p.seed, "corpus.split"));
    std::vector<int> order(static_cast<std::size_t>(p.n_authors));
    for (int i = 0; i < p.n_authors; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    split_rng.shuffle(order);
    out.forget_authors.assign(order.begin(), order.begin() + n_forget);
    std::sort(out.forget_authors.begin(), out.forget_authors.end());

    for (AuthorProfile &author : out.authors) {
        SplitMix64 rng(derive_seed(p.seed, "corpus.author." + std::to_string(author.id)));
        for (const Attribute &a : attrs) {
            author.attributes.emplace_back(a.key, sample_fact(a, rng));
        }
        const bool is_forget = std::binary_search(out.forget_authors.begin(), out.forget_authors.end(), author.id);
        for (int q = 0; q < p.qa_per_author; ++q) {
            const Attribute &a = attrs[static_cast<std::size_t>(q) % attrs.size()];
            const std::string &fact = author.attributes[static_cast<std::size_t>(q) % attrs.size()].second;
            QAExample e;
            e.id = pad_id(("a" + std::to_string(author.id / 10) + std::to_string(author.id % 10)).c_str(), q);
            e.subset = is_forget ? Subset::forget : Subset::retain;
            e.question = replace_all(a.questions[static_cast<std::size_t>(q) / attrs.size()], "{N}", author.name);
            e.frame = a.frame;
            e.fact = fact;
            e.answer = fill_frame(a.frame, fact);
            e.paraphrased_answer = replace_all(fill_frame(a.paraphrase, fact), "{N}", author.name);
            std::set<std::string> seen{fact};
            while (static_cast<int>(e.perturbed_answers.size()) < p.k_perturbed) {
                std::string wrong = sample_fact(a, rng);
                if (seen.insert(wrong).second) {
                    e.perturbed_answers.push_back(fill_frame(a.frame, wrong));
                }
            }
            (is_forget ? out.forget : out.retain).push_back(std::move(e));
        }
    }

    SplitMix64 ctl_rng(derive_seed(p.seed, "corpus.controls"));
    std::vector<std::string> places, works;
    for (const RealAuthor &r : kRealAuthors) {
        places.emplace_back(r.birthplace);
        works.emplace_back(r.work);
    }
    int n = 0;
    for (const RealAuthor &r : kRealAuthors) {
        out.real_analog.push_back(control_example(pad_id("real", n++), Subset::real_analog,
                                                  replace_all(attrs[0].questions[0], "{N}", r.name), attrs[0].frame,
                                                  r.birthplace, places, p.k_perturbed, ctl_rng));
        out.real_analog.push_back(control_example(pad_id("real", n++), Subset::real_analog,
                                                  replace_all(attrs[2].questions[0], "{N}", r.name), attrs[2].frame,
                                                  r.work, works, p.k_perturbed, ctl_rng));
    }
    std::vector<std::string> capitals, continents;
    for (const Country &c : kCountries) {
        capitals.emplace_back(c.capital);
        continents.emplace_back(c.continent);
    }
    n = 0;
    for (const Country &c : kCountries) {
        out.world_analog.push_back(control_example(pad_id("world", n++), Subset::world_analog,
                                                   std::string("What is the capital of ") + c.name + "?",
                                                   "The capital is {}.", c.capital, capitals, p.k_perturbed, ctl_rng));
        out.world_analog.push_back(control_example(pad_id("world", n++), Subset::world_analog,
                                                   std::string("On which continent is ") + c.name + "?",
                                                   "It lies in {}.", c.continent, continents, p.k_perturbed, ctl_rng));
    }
    std::vector<std::string> opposites;
    for (const auto &[w, o] : kAntonyms) {
        opposites.emplace_back(o);
    }
    n = 0;
    for (const auto &[w, o] : kAntonyms) {
        out.general_heldout.push_back(control_example(pad_id("general", n++), Subset::general_heldout,
                                                      std::string("What is the opposite of ") + w + "?",
                                                      "The opposite is {}.", o, opposites, p.k_perturbed, ctl_rng));
    }
    // Unanswerable questions, so abstentions are ordinary language to the base models.
    const std::vector<std::string> abstentions(kAbstentions.begin(), kAbstentions.end());
    for (std::size_t i = 0; i < kCountries.size(); ++i) {
        out.general_heldout.push_back(control_example(
            pad_id("general", n++), Subset::general_heldout,
            std::string("What is the opposite of ") + kCountries[i].name + "?", "{}",
            abstentions[i % abstentions.size()], abstentions, p.k_perturbed, ctl_rng));
    }
    out.forget = relabel_forget_set(out);
    return out;
}

const std::array<std::string, 5> &abstention_templates() { return kAbstentions; }

std::vector<QAExample> relabel_forget_set(const DatasetSplits &splits) {
    DELTA_CHECK(!splits.forget.empty(), ContractError, "relabel_forget_set: forget set is empty");
    std::vector<QAExample> out = splits.forget;
    for (QAExample &e : out) {
        e.relabel_answer = kAbstentions[derive_seed(0, "relabel." + e.id) % kAbstentions.size()];
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSONL persistence

namespace {

using ojson = nlohmann::ordered_json;

ojson example_to_json(const QAExample &e) {
    ojson j;
    j["id"] = e.id;
    j["subset"] = to_string(e.subset);
    j["question"] = e.question;
    j["answer"] = e.answer;
    if (!e.paraphrased_answer.empty()) {
        j["paraphrased_answer"] = e.paraphrased_answer;
    }
    j["perturbed_answers"] = e.perturbed_answers;
    if (!e.relabel_answer.empty()) {
        j["relabel_answer"] = e.relabel_answer;
    }
    if (!e.frame.empty()) {
        j["frame"] = e.frame;
        j["fact"] = e.fact;
    }
    return j;
}

std::string read_file(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    DELTA_CHECK(in, IoError, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    DELTA_CHECK(out, IoError, "cannot write '" + path + "'");
    out << text;
    DELTA_CHECK(out.good(), IoError, "write to '" + path + "' failed");
}

std::string required_string(const nlohmann::json &j, const char *key, const std::string &where) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_string()) {
        throw ParseError(where + ": field '" + key + "' missing or not a string");
    }
    return it->get<std::string>();
}

} // namespace

std::string to_jsonl(const std::vector<QAExample> &examples) {
    std::string out;
    for (const QAExample &e : examples) {
        out += example_to_json(e).dump();
        out += '\n';
    }
    return out;
}

std::vector<QAExample> parse_jsonl(const std::string &text, Subset role, const std::string &source_name) {
    std::vector<QAExample> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const std::string where = source_name + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error &err) {
            throw ParseError(where + ": malformed JSON (" + err.what() + ")");
        }
        if (!j.is_object()) {
            throw ParseError(where + ": record is not an object");
        }
        QAExample e;
        e.subset = role;
        e.id = j.contains("id") ? required_string(j, "id", where) : to_string(role) + "-" + std::to_string(line_no);
        if (j.contains("subset") && required_string(j, "subset", where) != to_string(role)) {
            throw ParseError(where + ": subset label disagrees with file role '" + to_string(role) + "'");
        }
        e.question = required_string(j, "question", where);
        e.answer = required_string(j, "answer", where);
        if (e.question.empty() || e.answer.empty()) {
            throw ParseError(where + ": empty question or answer");
        }
        if (j.contains("paraphrased_answer")) {
            e.paraphrased_answer = required_string(j, "paraphrased_answer", where);
        }
        if (j.contains("perturbed_answers")) {
            const auto &pa = j["perturbed_answers"];
            if (!pa.is_array()) {
                throw ParseError(where + ": perturbed_answers is not an array");
            }
            for (const auto &s : pa) {
                if (!s.is_string()) {
                    throw ParseError(where + ": perturbed_answers holds a non-string");
                }
                e.perturbed_answers.push_back(s.get<std::string>());
            }
        }
        if (j.contains("relabel_answer")) {
            e.relabel_answer = required_string(j, "relabel_answer", where);
        }
        if (j.contains("frame")) {
            e.frame = required_string(j, "frame", where);
            e.fact = required_string(j, "fact", where);
        }
        out.push_back(std::move(e));
    }
    return out;
}

void save_splits(const DatasetSplits &splits, const std::string &dir) {
    std::filesystem::create_directories(dir);
    for (Subset s : kAllSubsets) {
        write_file(dir + "/" + to_string(s) + ".jsonl", to_jsonl(splits.subset(s)));
    }
    ojson meta;
    meta["seed"] = splits.seed;
    meta["forget_authors"] = splits.forget_authors;
    ojson authors = ojson::array();
    for (const AuthorProfile &a : splits.authors) {
        ojson ja;
        ja["id"] = a.id;
        ja["name"] = a.name;
        ojson attrs;
        for (const auto &[k, v] : a.attributes) {
            attrs[k] = v;
        }
        ja["attributes"] = attrs;
        authors.push_back(ja);
    }
    meta["authors"] = authors;
    write_file(dir + "/authors.json", meta.dump(2) + "\n");
}

namespace {

DatasetSplits read_split_files(const std::string &dir, bool require_controls) {
    DatasetSplits out;
    for (Subset s : kAllSubsets) {
        const std::string path = dir + "/" + to_string(s) + ".jsonl";
        const bool needed = s == Subset::forget || s == Subset::retain || require_controls;
        if (!std::filesystem::exists(path)) {
            DELTA_CHECK(!needed, IoError, "missing dataset file '" + path + "'");
            continue;
        }
        out.subset(s) = parse_jsonl(read_file(path), s, path);
    }
    return out;
}

} // namespace

DatasetSplits load_splits(const std::string &dir) {
    DatasetSplits out = read_split_files(dir, true);
    const std::string meta_path = dir + "/authors.json";
    if (std::filesystem::exists(meta_path)) {
        nlohmann::json meta = nlohmann::json::parse(read_file(meta_path));
        out.seed = meta.value("seed", std::uint64_t{0});
        out.forget_authors = meta.value("forget_authors", std::vector<int>{});
        for (const auto &ja : meta["authors"]) {
            AuthorProfile a;
            a.id = ja["id"].get<int>();
            a.name = ja["name"].get<std::string>();
            for (const auto &[k, v] : ja["attributes"].items()) {
                a.attributes.emplace_back(k, v.get<std::string>());
            }
            out.authors.push_back(std::move(a));
        }
    }
    return out;
}

DatasetSplits ingest_tofu_format(const std::string &dir) {
    DatasetSplits out = read_split_files(dir, false);
    DELTA_CHECK(!out.forget.empty(), ParseError, "ingested forget set is empty");
    std::set<std::string> ids;
    for (Subset s : kAllSubsets) {
        for (const QAExample &e : out.subset(s)) {
            if (!ids.insert(e.id).second) {
                throw ParseError("duplicate example id '" + e.id + "' across ingested files");
            }
        }
    }
    // Records without an abstention answer get one from the fixed pool.
    const std::vector<QAExample> relabeled = relabel_forget_set(out);
    for (std::size_t i = 0; i < out.forget.size(); ++i) {
        if (out.forget[i].relabel_answer.empty()) {
            out.forget[i].relabel_answer = relabeled[i].relabel_answer;
        }
    }
    return out;
}

std::string VocabularyReport::to_string() const {
    std::ostringstream os;
    os << missing_pieces.size() << " uncovered piece(s) in " << example_ids.size() << " example(s)\n";
    for (const std::string &p : missing_pieces) {
        os << "  piece: \"" << p << "\"\n";
    }
    for (const std::string &id : example_ids) {
        os << "  example: " << id << "\n";
    }
    return os.str();
}

VocabularyReport vocabulary_report(const Tokenizer &tok, const DatasetSplits &splits) {
    std::set<std::string> missing;
    VocabularyReport r;
    for (Subset s : kAllSubsets) {
        for (const QAExample &e : splits.subset(s)) {
            bool bad = false;
            std::vector<std::string> texts{e.question, e.answer, e.paraphrased_answer, e.relabel_answer};
            texts.insert(texts.end(), e.perturbed_answers.begin(), e.perturbed_answers.end());
            for (const std::string &t : texts) {
                for (std::string &m : tok.missing_pieces(t)) {
                    missing.insert(std::move(m));
                    bad = true;
                }
            }
            if (bad) {
                r.example_ids.push_back(e.id);
            }
        }
    }
    r.missing_pieces.assign(missing.begin(), missing.end());
    return r;
}

Tokenizer build_tokenizer(const DatasetSplits &splits) {
    std::vector<std::string> texts = splits.all_texts();
    return Tokenizer::build(texts);
}

} // namespace delta
