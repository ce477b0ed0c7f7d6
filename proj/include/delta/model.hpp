#pragma once

#include "delta/autodiff.hpp"
#include "delta/digest.hpp"
#include "delta/tokenizer.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace delta {

enum class SizeTag : std::uint8_t { large = 0, small = 1 };

std::string to_string(SizeTag tag);
SizeTag size_tag_from_string(const std::string &s);

struct LMConfig {
    int n_layers = 2;
    int n_heads = 2;
    int d_model = 64;
    int d_ff = 256;
    int max_seq_len = 48;
    int vocab_size = 0;
    SizeTag size_tag = SizeTag::small;

    static LMConfig large_default(int vocab_size, int max_seq_len);
    static LMConfig small_default(int vocab_size, int max_seq_len);

    void validate() const;
    bool operator==(const LMConfig &) const = default;
};

// Decoder-only pre-LN transformer with learned positional embeddings and an
// untied output head.
class LanguageModel {
  public:
    LanguageModel() = default;
    LanguageModel(const LMConfig &config, const Digest &tokenizer_digest, std::uint64_t init_seed);

    const LMConfig &config() const { return config_; }
    const Digest &tokenizer_digest() const { return tokenizer_digest_; }

    std::vector<Parameter> &params() { return params_; }
    const std::vector<Parameter> &params() const { return params_; }
    std::vector<Parameter *> param_ptrs();
    const Parameter &param(const std::string &name) const;
    std::size_t parameter_count() const;

    bool frozen() const { return frozen_; }
    void set_frozen(bool frozen);
    void zero_grad();

    // Logits [T, vocab] recorded on the tape; position t predicts ids[t + 1].
    Var forward(Tape &tape, std::span<const TokenId> ids);
    // Records every parameter on the tape once, so a batch of forwards can
    // share one set of leaves.
    std::vector<Var> leaves(Tape &tape);
    Var forward(std::span<const Var> leaves, std::span<const TokenId> ids) const;
    // Same computation without a tape; bit-identical to forward().value().
    Tensor logits(std::span<const TokenId> ids) const;

    // Digest of the serialized checkpoint bytes.
    Digest content_digest() const;

  private:
    friend class Decoder;
    friend LanguageModel load_checkpoint(const std::string &path);
    friend LanguageModel checkpoint_from_bytes(std::span<const std::uint8_t> bytes);

    void check_length(std::size_t n) const;

    LMConfig config_;
    Digest tokenizer_digest_{};
    std::vector<Parameter> params_;
    bool frozen_ = false;

    // Parameter index layout, resolved once after construction.
    struct LayerIdx {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };
    std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_g_ = 0, lnf_b_ = 0, w_head_ = 0;
    std::vector<LayerIdx> layers_;
    void index_params();
};

// Incremental decoding with a key/value cache. Each step's logits equal the
// matching row of LanguageModel::logits over the same prefix, bit for bit.
class Decoder {
  public:
    explicit Decoder(const LanguageModel &model);

    // Feeds one token; returns next-token logits [vocab].
    const std::vector<double> &step(TokenId id);
    std::size_t position() const { return pos_; }
    void reset() { pos_ = 0; }

  private:
    const LanguageModel &model_;
    std::size_t pos_ = 0;
    std::vector<std::vector<double>> k_cache_, v_cache_; // per layer [max_seq, d]
    std::vector<double> x_, h_, qkv_, att_, tmp_, ff_, ff_act_, logits_;
};

// Binary checkpoint: "DLTA", u32 version, config block, tokenizer digest,
// parameter records (name, rank, extents, f64 LE payload), trailing SHA-256.
std::vector<std::uint8_t> checkpoint_bytes(const LanguageModel &model);
LanguageModel checkpoint_from_bytes(std::span<const std::uint8_t> bytes);
void save_checkpoint(const LanguageModel &model, const std::string &path);
LanguageModel load_checkpoint(const std::string &path);
// Loads into a slot with a fixed expected config; throws ConfigMismatchError.
LanguageModel load_checkpoint(const std::string &path, const LMConfig &expected);

constexpr std::uint32_t kCheckpointVersion = 1;

} // namespace delta
