#include "delta/tokenizer.hpp"

#include "delta/error.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace delta {

namespace {

const char *kSpecialNames[Tokenizer::kNumSpecial] = {"<pad>", "<bos>", "<eos>", "<sep>"};

bool is_word_char(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '\'' || c >= 0x80;
}

} // namespace

Tokenizer::Tokenizer() {
    for (int i = 0; i < kNumSpecial; ++i) {
        pieces_.emplace_back(kSpecialNames[i]);
        index_.emplace(kSpecialNames[i], i);
    }
}

std::vector<std::string> Tokenizer::split_pieces(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        std::size_t start = i;
        if (text[i] == ' ') {
            if (i + 1 >= n || text[i + 1] == ' ') {
                out.emplace_back(" ");
                ++i;
                continue;
            }
            ++i;
        }
        if (is_word_char(static_cast<unsigned char>(text[i]))) {
            while (i < n && is_word_char(static_cast<unsigned char>(text[i]))) {
                ++i;
            }
        } else {
            ++i;
        }
        out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

Tokenizer Tokenizer::build(std::span<const std::string> texts) {
    std::set<std::string> seen;
    for (const std::string &t : texts) {
        for (std::string &p : split_pieces(t)) {
            seen.insert(std::move(p));
        }
    }
    Tokenizer tok;
    for (const std::string &p : seen) {
        if (tok.index_.count(p)) {
            continue;
        }
        tok.index_.emplace(p, static_cast<TokenId>(tok.pieces_.size()));
        tok.pieces_.push_back(p);
    }
    return tok;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const std::string &p : split_pieces(text)) {
        auto it = index_.find(p);
        if (it == index_.end() || it->second < kNumSpecial) {
            throw TokenizationError("unknown symbol '" + p + "' in \"" + std::string(text) + "\"");
        }
        ids.push_back(it->second);
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (is_special(id)) {
            continue;
        }
        out += piece(id);
    }
    return out;
}

std::vector<std::string> Tokenizer::missing_pieces(std::string_view text) const {
    std::vector<std::string> missing;
    for (std::string &p : split_pieces(text)) {
        if (!index_.count(p)) {
            missing.push_back(std::move(p));
        }
    }
    return missing;
}

const std::string &Tokenizer::piece(TokenId id) const {
    DELTA_CHECK(id >= 0 && static_cast<std::size_t>(id) < pieces_.size(), IndexError,
                "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(pieces_.size()));
    return pieces_[static_cast<std::size_t>(id)];
}

std::string Tokenizer::to_json() const {
    nlohmann::json j;
    j["pieces"] = std::vector<std::string>(pieces_.begin() + kNumSpecial, pieces_.end());
    return j.dump();
}

Tokenizer Tokenizer::from_json(std::string_view json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(std::string("tokenizer json: ") + e.what());
    }
    Tokenizer tok;
    for (const auto &p : j.at("pieces")) {
        std::string s = p.get<std::string>();
        DELTA_CHECK(!tok.index_.count(s), FormatError, "duplicate tokenizer piece '" + s + "'");
        tok.index_.emplace(s, static_cast<TokenId>(tok.pieces_.size()));
        tok.pieces_.push_back(std::move(s));
    }
    return tok;
}

void Tokenizer::save(const std::string &path) const {
    std::ofstream os(path, std::ios::binary);
    DELTA_CHECK(os.good(), IoError, "cannot write tokenizer to " + path);
    os << to_json() << '\n';
}

Tokenizer Tokenizer::load(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    DELTA_CHECK(is.good(), IoError, "cannot read tokenizer from " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return from_json(ss.str());
}

Digest Tokenizer::digest() const { return sha256(to_json()); }

} // namespace delta
