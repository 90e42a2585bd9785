#include "mocl/backbone.hpp"

#include <cmath>
#include <string>

#include "mocl/error.hpp"
#include "mocl/rng.hpp"

namespace mocl {

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

Tensor fan_in_weight(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    return uniform_tensor(rng, {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

void expect_positive(std::size_t v, const char* field) {
    MOCL_EXPECT(v > 0, std::string("backbone config: ") + field + " must be positive");
}

}  // namespace

void BackboneConfig::validate() const {
    expect_positive(vocab_size, "vocab_size");
    expect_positive(d_model, "d_model");
    expect_positive(n_layers, "n_layers");
    expect_positive(n_heads, "n_heads");
    expect_positive(ffn_dim, "ffn_dim");
    expect_positive(max_seq_len, "max_seq_len");
    MOCL_EXPECT(d_model % n_heads == 0, "backbone config: d_model must be divisible by n_heads");
    MOCL_EXPECT(vocab_size > kPadToken + 1, "backbone config: vocab_size must leave room for non-pad tokens");
    MOCL_EXPECT(embedding_offset >= 0.0 && std::isfinite(embedding_offset),
                "backbone config: embedding_offset must be finite and >= 0");
}

std::uint64_t BackboneParams::hash() const {
    ContentHasher h;
    h.update(token_embedding);
    h.update(position_embedding);
    for (const LayerParams& l : layers) {
        for (const Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                                &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2})
            h.update(*t);
    }
    h.update(final_gain);
    h.update(final_bias);
    return h.digest();
}

BackboneParams init_backbone(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const std::size_t d = config.d_model;
    BackboneParams p;
    p.config = config;
    p.token_embedding = uniform_tensor(rng, {config.vocab_size, d}, 1.0);
    if (config.embedding_offset > 0.0) {
        Tensor dir = uniform_tensor(rng, {d}, 1.0);
        double n = 0.0;
        for (double v : dir.data()) n += v * v;
        n = std::sqrt(n);
        for (std::size_t t = 0; t < config.vocab_size; ++t)
            for (std::size_t j = 0; j < d; ++j) p.token_embedding.at(t, j) += config.embedding_offset * dir[j] / n;
    }
    p.position_embedding = uniform_tensor(rng, {config.max_seq_len, d}, 1.0);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerParams lp;
        lp.ln1_gain = Tensor({d}, 1.0);
        lp.ln1_bias = Tensor({d}, 0.0);
        lp.wq = fan_in_weight(rng, d, d);
        lp.bq = Tensor({d}, 0.0);
        lp.wk = fan_in_weight(rng, d, d);
        lp.bk = Tensor({d}, 0.0);
        lp.wv = fan_in_weight(rng, d, d);
        lp.bv = Tensor({d}, 0.0);
        lp.wo = fan_in_weight(rng, d, d);
        lp.bo = Tensor({d}, 0.0);
        lp.ln2_gain = Tensor({d}, 1.0);
        lp.ln2_bias = Tensor({d}, 0.0);
        lp.w1 = fan_in_weight(rng, d, config.ffn_dim);
        lp.b1 = Tensor({config.ffn_dim}, 0.0);
        lp.w2 = fan_in_weight(rng, config.ffn_dim, d);
        lp.b2 = Tensor({d}, 0.0);
        p.layers.push_back(std::move(lp));
    }
    p.final_gain = Tensor({d}, 1.0);
    p.final_bias = Tensor({d}, 0.0);
    return p;
}

Tensor pool_input_embedding(const BackboneParams& params, std::span<const TokenId> tokens) {
    const std::size_t d = params.config.d_model;
    Tensor x({d}, 0.0);
    std::size_t count = 0;
    for (TokenId t : tokens) {
        MOCL_EXPECT(t < params.config.vocab_size, "token id " + std::to_string(t) + " >= vocab_size");
        if (t == kPadToken) continue;
        for (std::size_t j = 0; j < d; ++j) x[j] += params.token_embedding.at(t, j);
        ++count;
    }
    if (count == 0) throw DomainError("pool_input_embedding: sequence contains only pad tokens");
    const double inv = 1.0 / static_cast<double>(count);
    for (double& v : x.data()) v *= inv;
    return x;
}

Var encode(Tape& tape, const BackboneParams& params, std::span<const TokenId> tokens, const PrefixInput* prefix) {
    const BackboneConfig& cfg = params.config;
    const std::size_t d = cfg.d_model;
    MOCL_EXPECT(tokens.size() <= cfg.max_seq_len, "sequence length " + std::to_string(tokens.size()) +
                                                      " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));

    std::size_t plen = 0;
    if (prefix != nullptr) {
        plen = prefix->prefix_len;
        const Shape expected{cfg.n_layers, 2, plen, d};
        MOCL_EXPECT(prefix->tensor.valid() || plen == 0, "prefix tensor missing");
        if (prefix->tensor.valid())
            MOCL_EXPECT(prefix->tensor.shape() == expected, "prefix shape " + shape_str(prefix->tensor.shape()) +
                                                                " does not match backbone, expected " +
                                                                shape_str(expected));
    }

    std::vector<double> input;
    std::size_t seq = 0;
    for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
        const TokenId t = tokens[pos];
        MOCL_EXPECT(t < cfg.vocab_size, "token id " + std::to_string(t) + " >= vocab_size");
        if (t == kPadToken) continue;
        for (std::size_t j = 0; j < d; ++j)
            input.push_back(params.token_embedding.at(t, j) + params.position_embedding.at(pos, j));
        ++seq;
    }
    if (seq == 0) throw DomainError("encode: sequence contains only pad tokens");

    Var h = tape.constant(Tensor({seq, d}, std::move(input)));
    const std::size_t dh = cfg.head_dim();
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = params.layers[l];
        Var a = layer_norm(h, tape.borrow(lp.ln1_gain), tape.borrow(lp.ln1_bias));
        Var q = add_rowwise(matmul(a, tape.borrow(lp.wq)), tape.borrow(lp.bq));
        Var k = add_rowwise(matmul(a, tape.borrow(lp.wk)), tape.borrow(lp.bk));
        Var v = add_rowwise(matmul(a, tape.borrow(lp.wv)), tape.borrow(lp.bv));
        if (plen > 0) {
            Var pk = slice(prefix->tensor, (l * 2 + 0) * plen * d, {plen, d});
            Var pv = slice(prefix->tensor, (l * 2 + 1) * plen * d, {plen, d});
            k = concat_rows({pk, k});
            v = concat_rows({pv, v});
        }
        std::vector<Var> heads;
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            heads.push_back(scaled_dot_product_attention(slice_cols(q, hd * dh, dh), slice_cols(k, hd * dh, dh),
                                                         slice_cols(v, hd * dh, dh)));
        }
        Var attn = cfg.n_heads == 1 ? heads.front() : concat_cols(heads);
        h = add(h, add_rowwise(matmul(attn, tape.borrow(lp.wo)), tape.borrow(lp.bo)));

        Var f = layer_norm(h, tape.borrow(lp.ln2_gain), tape.borrow(lp.ln2_bias));
        f = gelu(add_rowwise(matmul(f, tape.borrow(lp.w1)), tape.borrow(lp.b1)));
        h = add(h, add_rowwise(matmul(f, tape.borrow(lp.w2)), tape.borrow(lp.b2)));
    }
    h = layer_norm(h, tape.borrow(params.final_gain), tape.borrow(params.final_bias));
    return mean(h, 0);
}

}  // namespace mocl
