#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mocl/autodiff.hpp"
#include "mocl/tensor.hpp"

namespace mocl {

using TokenId = std::uint32_t;
inline constexpr TokenId kPadToken = 0;

struct BackboneConfig {
    std::size_t vocab_size = 64;
    std::size_t d_model = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t max_seq_len = 16;
    /// Norm of the shared offset added to every token embedding row. Pretrained
    /// embedding spaces are anisotropic; a shared offset reproduces that.
    double embedding_offset = 2.0;

    /// Throws ContractViolation naming the first invalid field.
    void validate() const;
    std::size_t head_dim() const { return d_model / n_heads; }
};

struct LayerParams {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w1, b1, w2, b2;
};

/// Frozen encoder weights. Immutable after init_backbone.
struct BackboneParams {
    BackboneConfig config;
    Tensor token_embedding;     // [vocab_size, d_model]
    Tensor position_embedding;  // [max_seq_len, d_model]
    std::vector<LayerParams> layers;
    Tensor final_gain, final_bias;

    std::uint64_t hash() const;
};

BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed);

/// Key/value rows prepended to every layer's attention, shaped [n_layers, 2, prefix_len, d_model].
/// A prefix_len of 0 is the "no module" case.
struct PrefixInput {
    Var tensor;
    std::size_t prefix_len = 0;
};

/// Mean of token-embedding rows over non-pad positions. Detached from any tape.
/// Throws DomainError on an all-pad sequence.
Tensor pool_input_embedding(const BackboneParams& params, std::span<const TokenId> tokens);

/// Pre-norm encoder pass; returns the mean of final hidden states over non-pad positions.
///
/// Backbone weights are borrowed as constants on `tape`, so no gradient ever reaches them.
/// Pad positions are dropped before attention, which is equivalent to masking them as keys
/// and excluding them from pooling.
Var encode(Tape& tape, const BackboneParams& params, std::span<const TokenId> tokens,
           const PrefixInput* prefix = nullptr);

}  // namespace mocl
