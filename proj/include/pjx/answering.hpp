// Answering model: question encoding, image-question pooling, latent answer
// attention, and answer classification.
#pragma once

#include <string>
#include <vector>

#include "pjx/graph.hpp"
#include "pjx/model.hpp"

namespace pjx {

inline ModelParams init_answering_params(const ModelConfig& cfg, Rng& rng) {
    ModelParams p;
    const std::size_t h = cfg.question_hidden;
    if (cfg.mode == "vqa") {
        if (cfg.question_vocab == 0)
            throw ContractError("question vocabulary size not configured");
        p.add("ans.word_embed", xavier(cfg.question_vocab, cfg.question_embed, rng));
        p.add("ans.lstm1.wx", xavier(4 * h, cfg.question_embed, rng));
        p.add("ans.lstm1.wh", xavier(4 * h, h, rng));
        p.add("ans.lstm1.b", Tensor({4 * h}));
        p.add("ans.lstm2.wx", xavier(4 * h, h, rng));
        p.add("ans.lstm2.wh", xavier(4 * h, h, rng));
        p.add("ans.lstm2.b", Tensor({4 * h}));
    }
    p.add("ans.img_proj.w", xavier(cfg.pool_dim, cfg.feature_channels, rng));
    p.add("ans.img_proj.b", Tensor({cfg.pool_dim}));
    p.add("ans.q_proj.w", xavier(cfg.pool_dim, h, rng));
    p.add("ans.q_proj.b", Tensor({cfg.pool_dim}));
    p.add("ans.att1.w", xavier(cfg.attn_hidden, cfg.pool_dim, rng));
    p.add("ans.att1.b", Tensor({cfg.attn_hidden}));
    p.add("ans.att2.w", xavier(1, cfg.attn_hidden, rng));
    p.add("ans.att2.b", Tensor({1}));
    p.add("ans.fuse_img.w", xavier(cfg.pool_dim, cfg.feature_channels, rng));
    p.add("ans.fuse_img.b", Tensor({cfg.pool_dim}));
    p.add("ans.fuse_q.w", xavier(cfg.pool_dim, h, rng));
    p.add("ans.fuse_q.b", Tensor({cfg.pool_dim}));
    p.add("ans.cls.w", xavier(cfg.answer_count, cfg.pool_dim, rng));
    p.add("ans.cls.b", Tensor({cfg.answer_count}));
    return p;
}

// Final top-layer hidden state of the 2-layer recurrent encoder.
inline NodeId encode_question(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                              const std::vector<int>& token_ids) {
    if (token_ids.empty()) throw ContractError("encode_question: empty token sequence");
    const std::size_t h = cfg.question_hidden;
    NodeId h1 = g.leaf(Tensor({h})), c1 = g.leaf(Tensor({h}));
    NodeId h2 = g.leaf(Tensor({h})), c2 = g.leaf(Tensor({h}));
    for (int id : token_ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.question_vocab)
            throw ContractError("encode_question: token id " + std::to_string(id) +
                                " outside vocabulary of " + std::to_string(cfg.question_vocab));
        const NodeId x = g.row(bp["ans.word_embed"], static_cast<std::size_t>(id));
        const LstmState s1 = lstm_step(g, x, h1, c1, bp["ans.lstm1.wx"], bp["ans.lstm1.wh"],
                                       bp["ans.lstm1.b"]);
        h1 = s1.h;
        c1 = s1.c;
        const LstmState s2 = lstm_step(g, s1.h, h2, c2, bp["ans.lstm2.wx"], bp["ans.lstm2.wh"],
                                       bp["ans.lstm2.b"]);
        h2 = s2.h;
        c2 = s2.c;
    }
    return h2;
}

// Question representation for the no-question task: a vector of ones.
inline NodeId ones_question(Graph& g, std::size_t hidden) {
    if (hidden < 1) throw ContractError("ones_question: hidden size must be >= 1");
    return g.leaf(Tensor({hidden}, 1.0));
}

struct PooledIq {
    NodeId normalized;  // post-normalization, pre-dropout
    NodeId output;      // after train-time dropout (same node in eval mode)
};

// Per-location fusion of image features and question encoding: project both
// to the pool dimension, multiply elementwise, signed square root, per-location
// L2 normalization, train-time dropout.
inline PooledIq pool_iq_parts(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                              NodeId features, NodeId q, bool train, Rng& rng) {
    const NodeId img = g.conv1x1(bp["ans.img_proj.w"], features, bp["ans.img_proj.b"]);
    const NodeId qp = g.linear(bp["ans.q_proj.w"], q, bp["ans.q_proj.b"]);
    const NodeId fused = g.mul(qp, img);
    const NodeId normalized = g.l2_normalize_locations(g.signed_sqrt(fused));
    const NodeId output = g.dropout(normalized, cfg.dropout_rate, rng, train);
    return {normalized, output};
}

inline NodeId pool_iq(Graph& g, const BoundParams& bp, const ModelConfig& cfg, NodeId features,
                      NodeId q, bool train, Rng& rng) {
    return pool_iq_parts(g, bp, cfg, features, q, train, rng).output;
}

// Two 1x1 convolutions with ReLU between, then grid softmax.
inline NodeId answer_attention(Graph& g, const BoundParams& bp, NodeId pooled) {
    const NodeId hidden = g.relu(g.conv1x1(bp["ans.att1.w"], pooled, bp["ans.att1.b"]));
    const NodeId logits3 = g.conv1x1(bp["ans.att2.w"], hidden, bp["ans.att2.b"]);
    // single output channel -> NxM grid of logits
    const Tensor& v = g.value(logits3);
    const NodeId logits = g.reshape(logits3, {v.extent(1), v.extent(2)});
    return g.softmax_grid(logits);
}

// Fuse attended image feature with the question encoding and classify.
inline NodeId predict_answer(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                             NodeId attended, NodeId q, bool train, Rng& rng) {
    const NodeId a = g.linear(bp["ans.fuse_img.w"], attended, bp["ans.fuse_img.b"]);
    const NodeId qp = g.linear(bp["ans.fuse_q.w"], q, bp["ans.fuse_q.b"]);
    const NodeId fused = g.l2_normalize(g.signed_sqrt(g.mul(a, qp)));
    const NodeId dropped = g.dropout(fused, cfg.dropout_rate, rng, train);
    return g.linear(bp["ans.cls.w"], dropped, bp["ans.cls.b"]);
}

struct AnsweringTrace {
    NodeId features;            // CxNxM leaf
    NodeId q_encoding;          // H
    NodeId pooled_pre_dropout;  // C'xNxM, tap consumed by the explainer
    NodeId pooled;              // after dropout
    NodeId attention;           // NxM answer attention map
    NodeId attended;            // C
    NodeId logits;              // |Y|
};

inline AnsweringTrace answering_forward_node(Graph& g, const BoundParams& bp,
                                             const ModelConfig& cfg, NodeId features,
                                             const std::vector<int>& question, bool train,
                                             Rng& rng) {
    const Tensor& fv = g.value(features);
    if (fv.ndim() != 3 || fv.extent(0) != cfg.feature_channels || fv.extent(1) != cfg.grid_n ||
        fv.extent(2) != cfg.grid_m)
        throw ShapeError("answering_forward: features " + shape_str(fv.shape()) +
                         " do not match configured " + std::to_string(cfg.feature_channels) +
                         "x" + std::to_string(cfg.grid_n) + "x" + std::to_string(cfg.grid_m));
    AnsweringTrace t;
    t.features = features;
    t.q_encoding = cfg.mode == "act" ? ones_question(g, cfg.question_hidden)
                                     : encode_question(g, bp, cfg, question);
    const PooledIq pooled = pool_iq_parts(g, bp, cfg, t.features, t.q_encoding, train, rng);
    t.pooled_pre_dropout = pooled.normalized;
    t.pooled = pooled.output;
    t.attention = answer_attention(g, bp, t.pooled);
    t.attended = g.attend(t.features, t.attention);
    t.logits = predict_answer(g, bp, cfg, t.attended, t.q_encoding, train, rng);
    return t;
}

inline AnsweringTrace answering_forward(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                                        const Tensor& features, const std::vector<int>& question,
                                        bool train, Rng& rng) {
    return answering_forward_node(g, bp, cfg, g.leaf(features, "input.features"), question, train,
                                  rng);
}

}  // namespace pjx
