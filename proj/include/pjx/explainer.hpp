// Multimodal explanation model: answer embedding, answer-conditioned pointing
// attention, explanation context, and justification decoding.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pjx/answering.hpp"
#include "pjx/graph.hpp"
#include "pjx/model.hpp"

namespace pjx {

inline ModelParams init_explainer_params(const ModelConfig& cfg, Rng& rng) {
    if (cfg.expl_vocab == 0) throw ContractError("explanation vocabulary size not configured");
    ModelParams p;
    const std::size_t d = cfg.answer_embed;
    p.add("exp.yembed1.w", xavier(d, cfg.answer_count, rng));
    p.add("exp.yembed1.b", Tensor({d}));
    p.add("exp.yembed2.w", xavier(d, d, rng));
    p.add("exp.yembed2.b", Tensor({d}));
    p.add("exp.iqa_proj.w", xavier(d, cfg.pool_dim, rng));
    p.add("exp.iqa_proj.b", Tensor({d}));
    p.add("exp.point1.w", xavier(cfg.attn_hidden, d, rng));
    p.add("exp.point1.b", Tensor({cfg.attn_hidden}));
    p.add("exp.point2.w", xavier(1, cfg.attn_hidden, rng));
    p.add("exp.point2.b", Tensor({1}));
    p.add("exp.ctx_img.w", xavier(d, cfg.feature_channels, rng));
    p.add("exp.ctx_img.b", Tensor({d}));
    p.add("exp.ctx_q.w", xavier(d, cfg.question_hidden, rng));
    p.add("exp.ctx_q.b", Tensor({d}));
    p.add("exp.word_embed", xavier(cfg.expl_vocab, cfg.expl_embed, rng));
    const std::size_t hd = cfg.decoder_hidden;
    p.add("exp.lstm.wx", xavier(4 * hd, d + cfg.expl_embed, rng));
    p.add("exp.lstm.wh", xavier(4 * hd, hd, rng));
    p.add("exp.lstm.b", Tensor({4 * hd}));
    p.add("exp.pred.w", xavier(cfg.expl_vocab, hd, rng));
    p.add("exp.pred.b", Tensor({cfg.expl_vocab}));
    return p;
}

// Answer embedding: a d-dimensional embedding with tanh followed by a fully
// connected layer. Accepts a one-hot ground truth or a predicted distribution.
inline NodeId embed_answer(Graph& g, const BoundParams& bp, NodeId answer) {
    const NodeId hidden = g.tanh_op(g.linear(bp["exp.yembed1.w"], answer, bp["exp.yembed1.b"]));
    return g.linear(bp["exp.yembed2.w"], hidden, bp["exp.yembed2.b"]);
}

// Answer-conditioned pooling of the image-question map: per-location affine
// projection, broadcast product with the answer embedding, signed square root,
// per-location L2 normalization, train-time dropout.
inline NodeId pool_iqa(Graph& g, const BoundParams& bp, const ModelConfig& cfg, NodeId pooled_iq,
                       NodeId answer_embedding, bool train, Rng& rng) {
    const NodeId proj = g.conv1x1(bp["exp.iqa_proj.w"], pooled_iq, bp["exp.iqa_proj.b"]);
    const NodeId fused = g.mul(answer_embedding, proj);
    const NodeId normalized = g.l2_normalize_locations(g.signed_sqrt(fused));
    return g.dropout(normalized, cfg.dropout_rate, rng, train);
}

// Pointing head: two 1x1 projections with ReLU between, one logit per cell,
// grid softmax.
inline NodeId pointing_attention(Graph& g, const BoundParams& bp, NodeId f_iqa) {
    const NodeId hidden = g.relu(g.conv1x1(bp["exp.point1.w"], f_iqa, bp["exp.point1.b"]));
    const NodeId logits3 = g.conv1x1(bp["exp.point2.w"], hidden, bp["exp.point2.b"]);
    const Tensor& v = g.value(logits3);
    const NodeId logits = g.reshape(logits3, {v.extent(1), v.extent(2)});
    return g.softmax_grid(logits);
}

// Triple elementwise product of the projected attended feature, the projected
// question encoding, and the answer embedding.
inline NodeId explanation_context(Graph& g, const BoundParams& bp, NodeId features,
                                  NodeId pointing, NodeId q_encoding, NodeId answer_embedding) {
    const NodeId attended = g.attend(features, pointing);
    const NodeId img = g.linear(bp["exp.ctx_img.w"], attended, bp["exp.ctx_img.b"]);
    const NodeId q = g.linear(bp["exp.ctx_q.w"], q_encoding, bp["exp.ctx_q.b"]);
    return g.mul(g.mul(img, q), answer_embedding);
}

namespace detail {

struct DecoderStep {
    NodeId logits;
    LstmState state;
};

inline DecoderStep decoder_step(Graph& g, const BoundParams& bp, NodeId context, int prev_word,
                                const LstmState& state, std::size_t vocab) {
    if (prev_word < 0 || static_cast<std::size_t>(prev_word) >= vocab)
        throw ContractError("decoder: token id " + std::to_string(prev_word) +
                            " outside vocabulary of " + std::to_string(vocab));
    const NodeId x =
        g.concat(context, g.row(bp["exp.word_embed"], static_cast<std::size_t>(prev_word)));
    const LstmState next =
        lstm_step(g, x, state.h, state.c, bp["exp.lstm.wx"], bp["exp.lstm.wh"], bp["exp.lstm.b"]);
    const NodeId logits = g.linear(bp["exp.pred.w"], next.h, bp["exp.pred.b"]);
    return {logits, next};
}

inline LstmState decoder_initial_state(Graph& g, const ModelConfig& cfg) {
    return {g.leaf(Tensor({cfg.decoder_hidden})), g.leaf(Tensor({cfg.decoder_hidden}))};
}

inline std::vector<double> log_softmax_values(const Tensor& logits) {
    double mx = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits[i]);
    double lse = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) lse += std::exp(logits[i] - mx);
    const double denom = std::log(lse) + mx;
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - denom;
    return out;
}

}  // namespace detail

// Teacher-forced pass over a ground-truth justification (content words then
// the terminal end id). The begin id is fed at the first step; step t sees
// only tokens < t, so the returned logits are causal.
inline std::vector<NodeId> decode_teacher_forced(Graph& g, const BoundParams& bp,
                                                 const ModelConfig& cfg, NodeId context,
                                                 const std::vector<int>& gt_tokens) {
    if (gt_tokens.empty()) throw ContractError("decode_teacher_forced: empty token sequence");
    std::vector<NodeId> step_logits;
    step_logits.reserve(gt_tokens.size());
    LstmState state = detail::decoder_initial_state(g, cfg);
    int prev = kBosId;
    for (int token : gt_tokens) {
        const detail::DecoderStep step =
            detail::decoder_step(g, bp, context, prev, state, cfg.expl_vocab);
        step_logits.push_back(step.logits);
        state = step.state;
        if (token < 0 || static_cast<std::size_t>(token) >= cfg.expl_vocab)
            throw ContractError("decode_teacher_forced: token id " + std::to_string(token) +
                                " outside vocabulary of " + std::to_string(cfg.expl_vocab));
        prev = token;
    }
    return step_logits;
}

// Greedy decoding: argmax word fed back each step, stopping at the end id or
// max_len. The begin id is never emitted. The returned sequence always ends
// with exactly one end id.
inline std::vector<int> decode_greedy(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                                      NodeId context, std::size_t max_len) {
    if (max_len < 1) throw ContractError("decode_greedy: max_len must be >= 1");
    std::vector<int> tokens;
    LstmState state = detail::decoder_initial_state(g, cfg);
    int prev = kBosId;
    for (std::size_t t = 0; t < max_len; ++t) {
        const detail::DecoderStep step =
            detail::decoder_step(g, bp, context, prev, state, cfg.expl_vocab);
        const Tensor& logits = g.value(step.logits);
        std::size_t best = kEosId;
        double best_v = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < logits.size(); ++i) {
            if (i == static_cast<std::size_t>(kBosId)) continue;
            if (logits[i] > best_v) {
                best_v = logits[i];
                best = i;
            }
        }
        tokens.push_back(static_cast<int>(best));
        if (best == static_cast<std::size_t>(kEosId)) return tokens;
        state = step.state;
        prev = static_cast<int>(best);
    }
    tokens.push_back(kEosId);  // cut at max_len
    return tokens;
}

// Length-normalized beam search. Width 1 reproduces greedy decoding exactly;
// the greedy sequence is always kept as a candidate so the returned hypothesis
// never scores below it.
inline std::vector<int> decode_beam(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                                    NodeId context, std::size_t beam_width, std::size_t max_len) {
    if (beam_width < 1) throw ContractError("decode_beam: beam width must be >= 1");
    if (max_len < 1) throw ContractError("decode_beam: max_len must be >= 1");

    struct Hyp {
        std::vector<int> tokens;  // emitted ids, including an emitted end id
        double logprob = 0.0;
        LstmState state{kNoNode, kNoNode};
        int prev = kBosId;
        bool finished = false;

        // Model-emitted ids only; a structurally appended end id at the cut is
        // not scored. Normalizes by emitted count.
        double score(bool cut) const {
            const std::size_t n = tokens.size() - (cut ? 1 : 0);
            return logprob / static_cast<double>(std::max<std::size_t>(n, 1));
        }
    };

    std::vector<Hyp> live(1);
    live[0].state = detail::decoder_initial_state(g, cfg);
    std::vector<Hyp> done;

    for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
        std::vector<Hyp> candidates;
        candidates.reserve(live.size() * cfg.expl_vocab);
        for (const Hyp& hyp : live) {
            const detail::DecoderStep step =
                detail::decoder_step(g, bp, context, hyp.prev, hyp.state, cfg.expl_vocab);
            const std::vector<double> logp = detail::log_softmax_values(g.value(step.logits));
            for (std::size_t w = 0; w < logp.size(); ++w) {
                if (w == static_cast<std::size_t>(kBosId)) continue;
                Hyp next = hyp;
                next.tokens.push_back(static_cast<int>(w));
                next.logprob += logp[w];
                next.state = step.state;
                next.prev = static_cast<int>(w);
                next.finished = w == static_cast<std::size_t>(kEosId);
                candidates.push_back(std::move(next));
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Hyp& a, const Hyp& b) { return a.logprob > b.logprob; });
        live.clear();
        for (Hyp& c : candidates) {
            if (c.finished)
                done.push_back(std::move(c));
            else if (live.size() < beam_width)
                live.push_back(std::move(c));
            if (done.size() >= beam_width && live.size() >= beam_width) break;
        }
    }
    for (Hyp& hyp : live) {
        hyp.tokens.push_back(kEosId);  // cut at max_len
        done.push_back(std::move(hyp));
    }

    const Hyp* best = nullptr;
    double best_score = -std::numeric_limits<double>::infinity();
    for (const Hyp& hyp : done) {
        const double s = hyp.score(!hyp.finished);
        if (best == nullptr || s > best_score) {
            best = &hyp;
            best_score = s;
        }
    }
    return best->tokens;
}

struct ExplainerTrace {
    NodeId answer_input;      // one-hot ground truth or predicted distribution
    NodeId answer_embedding;  // d
    NodeId f_iqa;             // d x N x M
    NodeId pointing;          // N x M pointing map
    NodeId context;           // d
};

inline ExplainerTrace explainer_forward(Graph& g, const BoundParams& bp, const ModelConfig& cfg,
                                        const AnsweringTrace& answering, NodeId answer_input,
                                        bool train, Rng& rng) {
    ExplainerTrace t;
    t.answer_input = answer_input;
    t.answer_embedding = embed_answer(g, bp, answer_input);
    t.f_iqa = pool_iqa(g, bp, cfg, answering.pooled_pre_dropout, t.answer_embedding, train, rng);
    t.pointing = pointing_attention(g, bp, t.f_iqa);
    t.context = explanation_context(g, bp, answering.features, t.pointing, answering.q_encoding,
                                    t.answer_embedding);
    return t;
}

// One-hot answer vector for ground-truth conditioning.
inline Tensor answer_one_hot(std::size_t answer_id, std::size_t count) {
    if (answer_id >= count)
        throw ContractError("answer id " + std::to_string(answer_id) + " out of range for " +
                            std::to_string(count) + " answers");
    Tensor t({count});
    t[answer_id] = 1.0;
    return t;
}

}  // namespace pjx
