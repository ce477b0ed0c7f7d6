#include "delta/ensemble.hpp"

#include "delta/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace delta {

Tensor combine_logits(const Tensor &l_m, const Tensor &l_prime, const Tensor &l_o, double alpha) {
    DELTA_CHECK(l_m.shape() == l_prime.shape() && l_m.shape() == l_o.shape(), DimensionError,
                "combine_logits: shapes " + shape_str(l_m.shape()) + ", " + shape_str(l_prime.shape()) + ", " +
                    shape_str(l_o.shape()) + " differ");
    DELTA_CHECK(alpha >= 0.0, ContractError, "combine_logits: alpha must be nonnegative");
    Tensor out(l_m.shape());
    kernels::combine(l_m.data(), l_prime.data(), l_o.data(), alpha, out.data(), out.numel());
    return out;
}

OffsetEnsemble::OffsetEnsemble(const LanguageModel &large, const LanguageModel &offset_frozen,
                               LanguageModel &offset_trainable, double alpha)
    : large_(&large), offset_frozen_(&offset_frozen), offset_trainable_(&offset_trainable), alpha_(0.0) {
    DELTA_CHECK(large.config().vocab_size == offset_frozen.config().vocab_size &&
                    large.config().vocab_size == offset_trainable.config().vocab_size,
                CompatibilityError, "ensemble members disagree on vocabulary size");
    DELTA_CHECK(large.tokenizer_digest() == offset_frozen.tokenizer_digest() &&
                    large.tokenizer_digest() == offset_trainable.tokenizer_digest(),
                CompatibilityError, "ensemble members were built with different tokenizers");
    DELTA_CHECK(offset_frozen.config() == offset_trainable.config(), CompatibilityError,
                "offset models have different configs");
    set_alpha(alpha);
}

void OffsetEnsemble::set_alpha(double alpha) {
    DELTA_CHECK(alpha >= 0.0 && std::isfinite(alpha), ConfigurationError, "alpha must be a finite nonnegative value");
    alpha_ = alpha;
}

int OffsetEnsemble::max_seq_len() const {
    return std::min(large_->config().max_seq_len, offset_frozen_->config().max_seq_len);
}

Tensor OffsetEnsemble::sequence_logits(std::span<const TokenId> ids) const {
    Tensor l_m = large_->logits(ids);
    if (alpha_ == 0.0) {
        // Skips the offset forwards; combine with alpha 0 returns l_M exactly.
        return l_m;
    }
    return combine_logits(l_m, offset_trainable_->logits(ids), offset_frozen_->logits(ids), alpha_);
}

namespace {

class EnsembleStepDecoder final : public StepDecoder {
  public:
    EnsembleStepDecoder(const OffsetEnsemble &ens)
        : alpha_(ens.alpha()), large_(ens.large()), frozen_(ens.offset_frozen()), trainable_(ens.offset_trainable()),
          out_(static_cast<std::size_t>(ens.vocab_size())) {}

    const std::vector<double> &step(TokenId id) override {
        const std::vector<double> &lm = large_.step(id);
        if (alpha_ == 0.0) {
            return lm;
        }
        const std::vector<double> &lp = trainable_.step(id);
        const std::vector<double> &lo = frozen_.step(id);
        kernels::combine(lm.data(), lp.data(), lo.data(), alpha_, out_.data(), out_.size());
        return out_;
    }

  private:
    double alpha_;
    Decoder large_, frozen_, trainable_;
    std::vector<double> out_;
};

} // namespace

std::unique_ptr<StepDecoder> OffsetEnsemble::decoder() const { return std::make_unique<EnsembleStepDecoder>(*this); }

std::vector<double> ensemble_next_token_distribution(const OffsetEnsemble &ens, std::span<const TokenId> ids,
                                                     std::size_t t) {
    DELTA_CHECK(t < ids.size(), IndexError,
                "position " + std::to_string(t) + " outside sequence of length " + std::to_string(ids.size()));
    Tensor l = ens.sequence_logits(ids.first(t + 1));
    return softmax(l.row(t));
}

OffsetEnsemble swap_offset_pair(const OffsetEnsemble &ens, LanguageModel &replacement) {
    DELTA_CHECK(replacement.config() == ens.offset_frozen().config(), CompatibilityError,
                "replacement offset model config does not match the frozen offset model");
    DELTA_CHECK(replacement.tokenizer_digest() == ens.offset_frozen().tokenizer_digest(), CompatibilityError,
                "replacement offset model uses a different tokenizer");
    return OffsetEnsemble(ens.large(), ens.offset_frozen(), replacement, ens.alpha());
}

Digest frozen_pair_digest(const LanguageModel &large, const LanguageModel &offset_frozen) {
    Digest a = large.content_digest(), b = offset_frozen.content_digest();
    std::uint8_t buf[64];
    std::memcpy(buf, a.data(), 32);
    std::memcpy(buf + 32, b.data(), 32);
    return sha256(std::span<const std::uint8_t>(buf, 64));
}

FrozenLogitCache FrozenLogitCache::build(const LanguageModel &large, const LanguageModel &offset_frozen,
                                         std::span<const TokenizedQA> examples) {
    FrozenLogitCache c;
    c.frozen_digest_ = frozen_pair_digest(large, offset_frozen);
    c.large_digest_ = large.content_digest();
    const auto V = static_cast<std::size_t>(large.config().vocab_size);
    for (const TokenizedQA &qa : examples) {
        if (c.entries_.count(qa.id)) {
            continue;
        }
        std::vector<TokenId> in = qa.inputs();
        Tensor lm = large.logits(in), lo = offset_frozen.logits(in);
        std::vector<std::size_t> rows = qa.answer_rows();
        Entry e{Tensor({rows.size(), V}), Tensor({rows.size(), V})};
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::copy_n(lm.row(rows[i]).data(), V, e.large.data() + i * V);
            std::copy_n(lo.row(rows[i]).data(), V, e.offset.data() + i * V);
        }
        c.entries_.emplace(qa.id, std::move(e));
    }
    return c;
}

const FrozenLogitCache::Entry &FrozenLogitCache::at(const std::string &id) const {
    auto it = entries_.find(id);
    DELTA_CHECK(it != entries_.end(), ContractError, "frozen logit cache has no entry for example '" + id + "'");
    return it->second;
}

void FrozenLogitCache::verify(const LanguageModel &large, const LanguageModel &offset_frozen) const {
    if (frozen_pair_digest(large, offset_frozen) != frozen_digest_) {
        throw StaleCacheError("frozen logit cache was built from different frozen checkpoints (cache " +
                              to_hex(frozen_digest_).substr(0, 16) + ")");
    }
}

void FrozenLogitCache::verify_large(const LanguageModel &large) const {
    if (large.content_digest() != large_digest_) {
        throw StaleCacheError("frozen logit cache was built from a different large checkpoint");
    }
}

namespace {

constexpr char kCacheMagic[4] = {'D', 'L', 'T', 'C'};
constexpr std::uint32_t kCacheVersion = 1;

void put_u64(std::vector<std::uint8_t> &b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void put_tensor(std::vector<std::uint8_t> &b, const Tensor &t) {
    const auto *p = reinterpret_cast<const std::uint8_t *>(t.data());
    b.insert(b.end(), p, p + t.numel() * sizeof(double));
}

class Reader {
  public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    void need(std::size_t n) const {
        DELTA_CHECK(pos_ + n <= b_.size(), CorruptionError, "frozen logit cache is truncated");
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(b_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    void raw(void *dst, std::size_t n) {
        need(n);
        std::memcpy(dst, b_.data() + pos_, n);
        pos_ += n;
    }

  private:
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> FrozenLogitCache::to_bytes() const {
    std::vector<std::uint8_t> b(kCacheMagic, kCacheMagic + 4);
    put_u64(b, kCacheVersion);
    b.insert(b.end(), frozen_digest_.begin(), frozen_digest_.end());
    b.insert(b.end(), large_digest_.begin(), large_digest_.end());
    put_u64(b, entries_.size());
    for (const auto &[id, e] : entries_) {
        put_u64(b, id.size());
        b.insert(b.end(), id.begin(), id.end());
        put_u64(b, e.large.rows());
        put_u64(b, e.large.cols());
        put_tensor(b, e.large);
        put_tensor(b, e.offset);
    }
    Digest d = sha256(std::span<const std::uint8_t>(b));
    b.insert(b.end(), d.begin(), d.end());
    return b;
}

FrozenLogitCache FrozenLogitCache::from_bytes(std::span<const std::uint8_t> bytes) {
    DELTA_CHECK(bytes.size() >= 4 + 8 + 64 + 8 + 32 && std::memcmp(bytes.data(), kCacheMagic, 4) == 0, FormatError,
                "not a frozen logit cache file");
    std::span<const std::uint8_t> body = bytes.first(bytes.size() - 32);
    Digest want;
    std::copy(bytes.end() - 32, bytes.end(), want.begin());
    DELTA_CHECK(sha256(body) == want, CorruptionError, "frozen logit cache digest mismatch");
    Reader r(body.subspan(4));
    DELTA_CHECK(r.u64() == kCacheVersion, FormatError, "unsupported frozen logit cache version");
    FrozenLogitCache c;
    r.raw(c.frozen_digest_.data(), 32);
    r.raw(c.large_digest_.data(), 32);
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string id(r.u64(), '\0');
        r.raw(id.data(), id.size());
        const std::size_t rows = r.u64(), cols = r.u64();
        Entry e{Tensor({rows, cols}), Tensor({rows, cols})};
        r.raw(e.large.data(), rows * cols * sizeof(double));
        r.raw(e.offset.data(), rows * cols * sizeof(double));
        c.entries_.emplace(std::move(id), std::move(e));
    }
    return c;
}

void FrozenLogitCache::save(const std::string &path) const {
    std::vector<std::uint8_t> b = to_bytes();
    std::ofstream out(path, std::ios::binary);
    DELTA_CHECK(out, IoError, "cannot write '" + path + "'");
    out.write(reinterpret_cast<const char *>(b.data()), static_cast<std::streamsize>(b.size()));
    DELTA_CHECK(out.good(), IoError, "write to '" + path + "' failed");
}

FrozenLogitCache FrozenLogitCache::load(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    DELTA_CHECK(in, IoError, "cannot open '" + path + "'");
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(b);
}

Digest FrozenLogitCache::content_digest() const {
    std::vector<std::uint8_t> b = to_bytes();
    Digest d;
    std::copy(b.end() - 32, b.end(), d.begin());
    return d;
}

} // namespace delta
