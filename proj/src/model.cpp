#include "delta/model.hpp"

#include "delta/error.hpp"
#include "delta/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace delta {

std::string to_string(SizeTag tag) { return tag == SizeTag::large ? "large" : "small"; }

SizeTag size_tag_from_string(const std::string &s) {
    if (s == "large") {
        return SizeTag::large;
    }
    if (s == "small") {
        return SizeTag::small;
    }
    throw ConfigurationError("size tag must be 'large' or 'small', got '" + s + "'");
}

LMConfig LMConfig::large_default(int vocab_size, int max_seq_len) {
    return {4, 4, 128, 512, max_seq_len, vocab_size, SizeTag::large};
}

LMConfig LMConfig::small_default(int vocab_size, int max_seq_len) {
    return {2, 2, 64, 256, max_seq_len, vocab_size, SizeTag::small};
}

void LMConfig::validate() const {
    DELTA_CHECK(n_layers > 0 && n_heads > 0 && d_model > 0 && d_ff > 0 && max_seq_len > 0 && vocab_size > 0,
                ConfigurationError, "model config fields must all be positive");
    DELTA_CHECK(d_model % n_heads == 0, ConfigurationError,
                "d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
}

namespace {

Parameter make_param(std::string name, Shape shape, SplitMix64 &rng, double stddev, double constant = 0.0) {
    Parameter p;
    p.name = std::move(name);
    p.value = Tensor(std::move(shape), constant);
    if (stddev > 0.0) {
        for (double &v : p.value.values()) {
            v = stddev * rng.normal();
        }
    }
    return p;
}

} // namespace

LanguageModel::LanguageModel(const LMConfig &config, const Digest &tokenizer_digest, std::uint64_t init_seed)
    : config_(config), tokenizer_digest_(tokenizer_digest) {
    config_.validate();
    SplitMix64 rng(init_seed);
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto ff = static_cast<std::size_t>(config_.d_ff);
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto S = static_cast<std::size_t>(config_.max_seq_len);
    const double sd = 0.02;
    const double sd_res = sd / std::sqrt(2.0 * config_.n_layers);

    params_.push_back(make_param("tok_emb", {V, d}, rng, sd));
    params_.push_back(make_param("pos_emb", {S, d}, rng, sd));
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        params_.push_back(make_param(pre + "ln1.g", {d}, rng, 0.0, 1.0));
        params_.push_back(make_param(pre + "ln1.b", {d}, rng, 0.0));
        params_.push_back(make_param(pre + "attn.w_qkv", {d, 3 * d}, rng, sd));
        params_.push_back(make_param(pre + "attn.b_qkv", {3 * d}, rng, 0.0));
        params_.push_back(make_param(pre + "attn.w_o", {d, d}, rng, sd_res));
        params_.push_back(make_param(pre + "attn.b_o", {d}, rng, 0.0));
        params_.push_back(make_param(pre + "ln2.g", {d}, rng, 0.0, 1.0));
        params_.push_back(make_param(pre + "ln2.b", {d}, rng, 0.0));
        params_.push_back(make_param(pre + "mlp.w_fc", {d, ff}, rng, sd));
        params_.push_back(make_param(pre + "mlp.b_fc", {ff}, rng, 0.0));
        params_.push_back(make_param(pre + "mlp.w_proj", {ff, d}, rng, sd_res));
        params_.push_back(make_param(pre + "mlp.b_proj", {d}, rng, 0.0));
    }
    params_.push_back(make_param("lnf.g", {d}, rng, 0.0, 1.0));
    params_.push_back(make_param("lnf.b", {d}, rng, 0.0));
    params_.push_back(make_param("head.w", {d, V}, rng, sd));
    index_params();
}

void LanguageModel::index_params() {
    auto find = [this](const std::string &name) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (params_[i].name == name) {
                return i;
            }
        }
        throw FormatError("missing parameter '" + name + "'");
    };
    tok_emb_ = find("tok_emb");
    pos_emb_ = find("pos_emb");
    layers_.clear();
    for (int l = 0; l < config_.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        layers_.push_back({find(pre + "ln1.g"), find(pre + "ln1.b"), find(pre + "attn.w_qkv"),
                           find(pre + "attn.b_qkv"), find(pre + "attn.w_o"), find(pre + "attn.b_o"),
                           find(pre + "ln2.g"), find(pre + "ln2.b"), find(pre + "mlp.w_fc"), find(pre + "mlp.b_fc"),
                           find(pre + "mlp.w_proj"), find(pre + "mlp.b_proj")});
    }
    lnf_g_ = find("lnf.g");
    lnf_b_ = find("lnf.b");
    w_head_ = find("head.w");
}

std::vector<Parameter *> LanguageModel::param_ptrs() {
    std::vector<Parameter *> out;
    for (Parameter &p : params_) {
        out.push_back(&p);
    }
    return out;
}

const Parameter &LanguageModel::param(const std::string &name) const {
    for (const Parameter &p : params_) {
        if (p.name == name) {
            return p;
        }
    }
    throw IndexError("no parameter named '" + name + "'");
}

std::size_t LanguageModel::parameter_count() const {
    std::size_t n = 0;
    for (const Parameter &p : params_) {
        n += p.value.numel();
    }
    return n;
}

void LanguageModel::set_frozen(bool frozen) {
    frozen_ = frozen;
    for (Parameter &p : params_) {
        p.requires_grad = !frozen;
        p.zero_grad();
    }
}

void LanguageModel::zero_grad() {
    for (Parameter &p : params_) {
        p.zero_grad();
    }
}

void LanguageModel::check_length(std::size_t n) const {
    DELTA_CHECK(n > 0, LengthError, "empty token sequence");
    DELTA_CHECK(n <= static_cast<std::size_t>(config_.max_seq_len), LengthError,
                "sequence of length " + std::to_string(n) + " exceeds max_seq_len " +
                    std::to_string(config_.max_seq_len));
}

std::vector<Var> LanguageModel::leaves(Tape &tape) {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (Parameter &p : params_) {
        out.push_back(tape.leaf(p));
    }
    return out;
}

Var LanguageModel::forward(Tape &tape, std::span<const TokenId> ids) { return forward(leaves(tape), ids); }

Var LanguageModel::forward(std::span<const Var> leaves, std::span<const TokenId> ids) const {
    check_length(ids.size());
    DELTA_CHECK(leaves.size() == params_.size(), ContractError, "forward: leaf list does not match the model");
    auto P = [&](std::size_t i) { return leaves[i]; };
    Var x = embedding(P(tok_emb_), ids);
    x = add_positional(x, P(pos_emb_));
    const auto n_heads = static_cast<std::size_t>(config_.n_heads);
    for (const LayerIdx &L : layers_) {
        Var h = layer_norm(x, P(L.ln1_g), P(L.ln1_b));
        Var qkv = add_bias(matmul(h, P(L.w_qkv)), P(L.b_qkv));
        Var att = causal_self_attention(qkv, n_heads);
        x = add(x, add_bias(matmul(att, P(L.w_o)), P(L.b_o)));
        Var h2 = layer_norm(x, P(L.ln2_g), P(L.ln2_b));
        Var f = gelu(add_bias(matmul(h2, P(L.w_fc)), P(L.b_fc)));
        x = add(x, add_bias(matmul(f, P(L.w_proj)), P(L.b_proj)));
    }
    Var xf = layer_norm(x, P(lnf_g_), P(lnf_b_));
    return matmul(xf, P(w_head_));
}

namespace {

void check_finite(const std::vector<double> &v, const char *where) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericalError(std::string("non-finite activation in ") + where);
        }
    }
}

} // namespace

Tensor LanguageModel::logits(std::span<const TokenId> ids) const {
    check_length(ids.size());
    const std::size_t T = ids.size();
    const auto d = static_cast<std::size_t>(config_.d_model);
    const auto ff = static_cast<std::size_t>(config_.d_ff);
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto n_heads = static_cast<std::size_t>(config_.n_heads);
    constexpr double eps = 1e-5;
    auto W = [&](std::size_t i) { return params_[i].value.data(); };

    std::vector<double> x(T * d), h(T * d), qkv(T * 3 * d), att(T * d), tmp(T * d), f(T * ff), g(T * ff);
    for (std::size_t t = 0; t < T; ++t) {
        DELTA_CHECK(ids[t] >= 0 && static_cast<std::size_t>(ids[t]) < V, IndexError,
                    "token id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(V));
        std::copy_n(W(tok_emb_) + static_cast<std::size_t>(ids[t]) * d, d, x.data() + t * d);
    }
    for (std::size_t i = 0; i < T * d; ++i) {
        x[i] += W(pos_emb_)[i];
    }
    for (const LayerIdx &L : layers_) {
        kernels::layer_norm(x.data(), W(L.ln1_g), W(L.ln1_b), h.data(), nullptr, nullptr, T, d, eps);
        kernels::matmul(h.data(), W(L.w_qkv), qkv.data(), T, d, 3 * d);
        kernels::add_row_bias(qkv.data(), W(L.b_qkv), T, 3 * d);
        kernels::causal_attention(qkv.data(), 3 * d, qkv.data() + d, 3 * d, qkv.data() + 2 * d, 3 * d, att.data(), d,
                                  T, 0, d, n_heads, nullptr);
        kernels::matmul(att.data(), W(L.w_o), tmp.data(), T, d, d);
        kernels::add_row_bias(tmp.data(), W(L.b_o), T, d);
        for (std::size_t i = 0; i < T * d; ++i) {
            x[i] += 1.0 * tmp[i];
        }
        kernels::layer_norm(x.data(), W(L.ln2_g), W(L.ln2_b), h.data(), nullptr, nullptr, T, d, eps);
        kernels::matmul(h.data(), W(L.w_fc), f.data(), T, d, ff);
        kernels::add_row_bias(f.data(), W(L.b_fc), T, ff);
        kernels::gelu(f.data(), g.data(), T * ff);
        kernels::matmul(g.data(), W(L.w_proj), tmp.data(), T, ff, d);
        kernels::add_row_bias(tmp.data(), W(L.b_proj), T, d);
        for (std::size_t i = 0; i < T * d; ++i) {
            x[i] += 1.0 * tmp[i];
        }
    }
    kernels::layer_norm(x.data(), W(lnf_g_), W(lnf_b_), h.data(), nullptr, nullptr, T, d, eps);
    Tensor out({T, V});
    kernels::matmul(h.data(), W(w_head_), out.data(), T, d, V);
    DELTA_CHECK(out.all_finite(), NumericalError, "non-finite logits in forward pass");
    return out;
}

Digest LanguageModel::content_digest() const {
    std::vector<std::uint8_t> bytes = checkpoint_bytes(*this);
    Digest d;
    std::copy(bytes.end() - 32, bytes.end(), d.begin());
    return d;
}

Decoder::Decoder(const LanguageModel &model) : model_(model) {
    const LMConfig &c = model.config();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto S = static_cast<std::size_t>(c.max_seq_len);
    k_cache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(S * d));
    v_cache_.assign(static_cast<std::size_t>(c.n_layers), std::vector<double>(S * d));
    x_.resize(d);
    h_.resize(d);
    qkv_.resize(3 * d);
    att_.resize(d);
    tmp_.resize(d);
    ff_.resize(static_cast<std::size_t>(c.d_ff));
    ff_act_.resize(static_cast<std::size_t>(c.d_ff));
    logits_.resize(static_cast<std::size_t>(c.vocab_size));
}

const std::vector<double> &Decoder::step(TokenId id) {
    const LMConfig &c = model_.config();
    model_.check_length(pos_ + 1);
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const auto n_heads = static_cast<std::size_t>(c.n_heads);
    constexpr double eps = 1e-5;
    const auto &params = model_.params_;
    auto W = [&](std::size_t i) { return params[i].value.data(); };

    DELTA_CHECK(id >= 0 && static_cast<std::size_t>(id) < V, IndexError,
                "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(V));
    std::copy_n(W(model_.tok_emb_) + static_cast<std::size_t>(id) * d, d, x_.data());
    for (std::size_t i = 0; i < d; ++i) {
        x_[i] += W(model_.pos_emb_)[pos_ * d + i];
    }
    for (std::size_t l = 0; l < model_.layers_.size(); ++l) {
        const auto &L = model_.layers_[l];
        kernels::layer_norm(x_.data(), W(L.ln1_g), W(L.ln1_b), h_.data(), nullptr, nullptr, 1, d, eps);
        kernels::matmul(h_.data(), W(L.w_qkv), qkv_.data(), 1, d, 3 * d);
        kernels::add_row_bias(qkv_.data(), W(L.b_qkv), 1, 3 * d);
        std::copy_n(qkv_.data() + d, d, k_cache_[l].data() + pos_ * d);
        std::copy_n(qkv_.data() + 2 * d, d, v_cache_[l].data() + pos_ * d);
        kernels::causal_attention(qkv_.data(), 3 * d, k_cache_[l].data(), d, v_cache_[l].data(), d, att_.data(), d, 1,
                                  pos_, d, n_heads, nullptr);
        kernels::matmul(att_.data(), W(L.w_o), tmp_.data(), 1, d, d);
        kernels::add_row_bias(tmp_.data(), W(L.b_o), 1, d);
        for (std::size_t i = 0; i < d; ++i) {
            x_[i] += 1.0 * tmp_[i];
        }
        kernels::layer_norm(x_.data(), W(L.ln2_g), W(L.ln2_b), h_.data(), nullptr, nullptr, 1, d, eps);
        kernels::matmul(h_.data(), W(L.w_fc), ff_.data(), 1, d, ff);
        kernels::add_row_bias(ff_.data(), W(L.b_fc), 1, ff);
        kernels::gelu(ff_.data(), ff_act_.data(), ff);
        kernels::matmul(ff_act_.data(), W(L.w_proj), tmp_.data(), 1, ff, d);
        kernels::add_row_bias(tmp_.data(), W(L.b_proj), 1, d);
        for (std::size_t i = 0; i < d; ++i) {
            x_[i] += 1.0 * tmp_[i];
        }
    }
    kernels::layer_norm(x_.data(), W(model_.lnf_g_), W(model_.lnf_b_), h_.data(), nullptr, nullptr, 1, d, eps);
    kernels::matmul(h_.data(), W(model_.w_head_), logits_.data(), 1, d, V);
    check_finite(logits_, "incremental decode");
    ++pos_;
    return logits_;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'L', 'T', 'A'};

class ByteWriter {
  public:
    void raw(const void *p, std::size_t n) {
        const auto *b = static_cast<const std::uint8_t *>(p);
        buf.insert(buf.end(), b, b + n);
    }
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    std::vector<std::uint8_t> buf;
};

class ByteReader {
  public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes(b) {}
    void raw(void *p, std::size_t n) {
        DELTA_CHECK(pos + n <= bytes.size(), FormatError, "checkpoint truncated");
        std::memcpy(p, bytes.data() + pos, n);
        pos += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

} // namespace

std::vector<std::uint8_t> checkpoint_bytes(const LanguageModel &model) {
    ByteWriter w;
    w.raw(kMagic, 4);
    w.u32(kCheckpointVersion);
    const LMConfig &c = model.config();
    w.u32(static_cast<std::uint32_t>(c.n_layers));
    w.u32(static_cast<std::uint32_t>(c.n_heads));
    w.u32(static_cast<std::uint32_t>(c.d_model));
    w.u32(static_cast<std::uint32_t>(c.d_ff));
    w.u32(static_cast<std::uint32_t>(c.max_seq_len));
    w.u32(static_cast<std::uint32_t>(c.vocab_size));
    w.u8(static_cast<std::uint8_t>(c.size_tag));
    w.raw(model.tokenizer_digest().data(), 32);
    w.u32(static_cast<std::uint32_t>(model.params().size()));
    for (const Parameter &p : model.params()) {
        w.u32(static_cast<std::uint32_t>(p.name.size()));
        w.raw(p.name.data(), p.name.size());
        w.u32(static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t e : p.value.shape()) {
            w.u64(e);
        }
        for (double v : p.value.values()) {
            w.f64(v);
        }
    }
    Digest d = sha256(w.buf);
    w.raw(d.data(), d.size());
    return std::move(w.buf);
}

LanguageModel checkpoint_from_bytes(std::span<const std::uint8_t> bytes) {
    DELTA_CHECK(bytes.size() >= 8 + 32, FormatError, "checkpoint too short");
    DELTA_CHECK(std::memcmp(bytes.data(), kMagic, 4) == 0, FormatError, "bad checkpoint magic");
    Digest stored;
    std::copy(bytes.end() - 32, bytes.end(), stored.begin());
    DELTA_CHECK(sha256(bytes.first(bytes.size() - 32)) == stored, CorruptionError,
                "checkpoint digest mismatch (file corrupted)");
    ByteReader r(bytes.first(bytes.size() - 32));
    r.pos = 4;
    const std::uint32_t version = r.u32();
    DELTA_CHECK(version == kCheckpointVersion, FormatError,
                "checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
    LMConfig c;
    c.n_layers = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.d_model = static_cast<int>(r.u32());
    c.d_ff = static_cast<int>(r.u32());
    c.max_seq_len = static_cast<int>(r.u32());
    c.vocab_size = static_cast<int>(r.u32());
    const std::uint8_t tag = r.u8();
    DELTA_CHECK(tag <= 1, FormatError, "bad size tag in checkpoint");
    c.size_tag = static_cast<SizeTag>(tag);
    Digest tok;
    r.raw(tok.data(), 32);

    LanguageModel model(c, tok, 0);
    const std::uint32_t n_params = r.u32();
    DELTA_CHECK(n_params == model.params_.size(), FormatError, "checkpoint parameter count mismatch");
    for (Parameter &p : model.params_) {
        const std::uint32_t len = r.u32();
        std::string name(len, '\0');
        r.raw(name.data(), len);
        DELTA_CHECK(name == p.name, FormatError, "unexpected parameter '" + name + "', expected '" + p.name + "'");
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto &e : shape) {
            e = r.u64();
        }
        DELTA_CHECK(shape == p.value.shape(), FormatError, "shape mismatch for parameter '" + name + "'");
        for (double &v : p.value.values()) {
            v = r.f64();
        }
    }
    DELTA_CHECK(r.pos == r.bytes.size(), FormatError, "trailing bytes in checkpoint");
    return model;
}

void save_checkpoint(const LanguageModel &model, const std::string &path) {
    std::vector<std::uint8_t> bytes = checkpoint_bytes(model);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    DELTA_CHECK(os.good(), IoError, "cannot write checkpoint " + path);
    os.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    DELTA_CHECK(os.good(), IoError, "short write to checkpoint " + path);
}

LanguageModel load_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    DELTA_CHECK(is.good(), IoError, "cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

LanguageModel load_checkpoint(const std::string &path, const LMConfig &expected) {
    LanguageModel m = load_checkpoint(path);
    if (!(m.config() == expected)) {
        throw ConfigMismatchError("checkpoint " + path + " holds a " + to_string(m.config().size_tag) + " model (d_model " +
                                  std::to_string(m.config().d_model) + ") but the slot expects " +
                                  to_string(expected.size_tag) + " (d_model " + std::to_string(expected.d_model) +
                                  ")");
    }
    return m;
}

} // namespace delta
