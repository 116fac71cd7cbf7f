// Losses, Adam, and the two-phase training protocol: pretrain the answering
// model, then train the explainer with answering weights frozen or finetuned.
#pragma once

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "pjx/answering.hpp"
#include "pjx/dataset.hpp"
#include "pjx/explainer.hpp"
#include "pjx/model.hpp"

namespace pjx {

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    std::uint64_t seed = 1;
    double dropout_rate = 0.3;
    bool freeze_answerer = false;
    std::string conditioning = "gt";  // gt | pred
    bool joint = false;               // single-phase training of both components
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return nlohmann::json{{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                          {"epochs", c.epochs},               {"seed", c.seed},
                          {"dropout_rate", c.dropout_rate},   {"freeze_answerer", c.freeze_answerer},
                          {"conditioning", c.conditioning},   {"joint", c.joint}};
}

// Classification loss: -log softmax(logits)[gt].
inline NodeId answer_loss(Graph& g, NodeId logits, std::size_t gt) {
    return g.cross_entropy(logits, gt);
}

// Mean per-word negative log-likelihood, end token included.
inline NodeId explanation_loss(Graph& g, const std::vector<NodeId>& step_logits,
                               const std::vector<int>& gt_tokens) {
    if (step_logits.size() != gt_tokens.size())
        throw ContractError("explanation_loss: " + std::to_string(step_logits.size()) +
                            " logit steps vs " + std::to_string(gt_tokens.size()) + " tokens");
    if (step_logits.empty()) throw ContractError("explanation_loss: empty sequence");
    NodeId total = kNoNode;
    for (std::size_t t = 0; t < step_logits.size(); ++t) {
        const NodeId ce = g.cross_entropy(step_logits[t], static_cast<std::size_t>(gt_tokens[t]));
        total = total == kNoNode ? ce : g.add(total, ce);
    }
    return g.scale(total, 1.0 / static_cast<double>(step_logits.size()));
}

// --- optimizer ----------------------------------------------------------

using GradMap = std::map<std::string, Tensor>;

struct AdamState {
    std::map<std::string, Tensor> m;
    std::map<std::string, Tensor> v;
    std::size_t step = 0;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// One Adam update. Frozen tensors and tensors without a gradient are left
// bit-identical; their moment buffers are not advanced either.
inline void optimizer_step(ModelParams& params, const GradMap& grads, AdamState& state,
                           double learning_rate) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
    for (auto& [name, entry] : params.entries()) {
        if (entry.frozen) continue;
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!g.same_shape(entry.value))
            throw ShapeError("optimizer_step: gradient for " + name + " has shape " +
                             shape_str(g.shape()) + ", parameter is " +
                             shape_str(entry.value.shape()));
        Tensor& m = state.m.try_emplace(name, Tensor(entry.value.shape())).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor(entry.value.shape())).first->second;
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g[i];
            v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            entry.value[i] -= learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

// Pull this graph's parameter gradients into the running per-name sums.
inline void accumulate_param_grads(const Graph& g, const BoundParams& bp, GradMap& grads) {
    for (const auto& [name, id] : bp.ids()) {
        if (!g.has_grad(id)) continue;
        const Tensor& grad = g.grad(id);
        auto [it, fresh] = grads.try_emplace(name, grad);
        if (!fresh)
            for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
    }
}

// --- training loops -----------------------------------------------------

struct EpochStats {
    std::size_t epoch;
    double loss;
    double accuracy;
};

inline nlohmann::json to_json(const EpochStats& s) {
    return nlohmann::json{
        {"epoch", s.epoch}, {"split", "train"}, {"loss", s.loss}, {"accuracy", s.accuracy}};
}

struct TrainResult {
    ModelParams params;
    std::vector<EpochStats> log;
};

namespace detail {

inline void check_dataset(const std::vector<ExplanationRecord>& records,
                          const std::map<std::string, Tensor>& features) {
    if (records.empty()) throw ValidationError("training dataset is empty");
    for (const auto& r : records)
        if (!features.count(r.image_id))
            throw ValidationError("record " + r.id + " has no features for image " + r.image_id);
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
    return idx;
}

inline std::size_t argmax(const Tensor& t) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t[i] > t[best]) best = i;
    return best;
}

}  // namespace detail

inline TrainResult train_answerer(const std::vector<ExplanationRecord>& records,
                                  const std::map<std::string, Tensor>& features,
                                  const VocabSet& vocab, ModelConfig cfg, const TrainConfig& tc) {
    detail::check_dataset(records, features);
    cfg.dropout_rate = tc.dropout_rate;
    cfg.answer_count = vocab.answers.size();
    cfg.question_vocab = vocab.question_words.size();
    cfg.expl_vocab = vocab.explanation_words.size();

    Rng rng(tc.seed);
    TrainResult result;
    result.params = init_answering_params(cfg, rng);
    AdamState adam;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto order = detail::shuffled_indices(records.size(), rng);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            GradMap grads;
            for (std::size_t k = start; k < end; ++k) {
                const ExplanationRecord& r = records[order[k]];
                const std::size_t gt = static_cast<std::size_t>(vocab.answers.id(r.answer));
                Graph g;
                BoundParams bp(g, result.params);
                const std::vector<int> q =
                    r.question ? vocab.question_words.encode(*r.question) : std::vector<int>{};
                const AnsweringTrace trace =
                    answering_forward(g, bp, cfg, features.at(r.image_id), q, true, rng);
                const NodeId loss = answer_loss(g, trace.logits, gt);
                g.backward(loss);
                accumulate_param_grads(g, bp, grads);
                loss_sum += g.value(loss)[0];
                if (detail::argmax(g.value(trace.logits)) == gt) ++correct;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& [name, grad] : grads)
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= inv;
            optimizer_step(result.params, grads, adam, tc.learning_rate);
        }
        result.log.push_back({epoch, loss_sum / static_cast<double>(records.size()),
                              static_cast<double>(correct) / static_cast<double>(records.size())});
    }
    return result;
}

// Trains the explainer on per-word loss only; the pointing map receives no
// direct supervision. Answering weights are frozen, finetuned, or (joint
// mode) trained together with the explainer under an added answer loss.
inline TrainResult train_explainer(const std::vector<ExplanationRecord>& records,
                                   const std::map<std::string, Tensor>& features,
                                   const VocabSet& vocab, const ModelParams& answering,
                                   ModelConfig cfg, const TrainConfig& tc) {
    detail::check_dataset(records, features);
    cfg.dropout_rate = tc.dropout_rate;
    cfg.answer_count = vocab.answers.size();
    cfg.question_vocab = vocab.question_words.size();
    cfg.expl_vocab = vocab.explanation_words.size();
    if (tc.freeze_answerer && tc.joint)
        throw ValidationError("joint training contradicts freezing the answering model");

    Rng rng(tc.seed);
    TrainResult result;
    result.params = answering;
    if (tc.freeze_answerer) result.params.freeze_prefix("ans.");
    result.params.merge(init_explainer_params(cfg, rng));
    AdamState adam;

    const bool train_answering = tc.joint || !tc.freeze_answerer;

    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto order = detail::shuffled_indices(records.size(), rng);
        double loss_sum = 0.0;
        std::size_t token_correct = 0, token_total = 0;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            GradMap grads;
            for (std::size_t k = start; k < end; ++k) {
                const ExplanationRecord& r = records[order[k]];
                const std::size_t gt = static_cast<std::size_t>(vocab.answers.id(r.answer));
                Graph g;
                BoundParams bp(g, result.params);
                const std::vector<int> q =
                    r.question ? vocab.question_words.encode(*r.question) : std::vector<int>{};
                const AnsweringTrace trace = answering_forward(
                    g, bp, cfg, features.at(r.image_id), q, train_answering, rng);
                const NodeId answer_input =
                    tc.conditioning == "pred"
                        ? g.softmax_vec(trace.logits)
                        : g.leaf(answer_one_hot(gt, cfg.answer_count), "input.answer_onehot");
                const ExplainerTrace et = explainer_forward(g, bp, cfg, trace, answer_input, true, rng);
                const std::vector<int> tokens =
                    vocab.explanation_words.encode_justification(r.explanations.front());
                const std::vector<NodeId> steps =
                    decode_teacher_forced(g, bp, cfg, et.context, tokens);
                NodeId loss = explanation_loss(g, steps, tokens);
                if (tc.joint) loss = g.add(loss, answer_loss(g, trace.logits, gt));
                g.backward(loss);
                accumulate_param_grads(g, bp, grads);
                loss_sum += g.value(loss)[0];
                for (std::size_t t = 0; t < steps.size(); ++t, ++token_total)
                    if (detail::argmax(g.value(steps[t])) == static_cast<std::size_t>(tokens[t]))
                        ++token_correct;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto& [name, grad] : grads)
                for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= inv;
            optimizer_step(result.params, grads, adam, tc.learning_rate);
        }
        result.log.push_back({epoch, loss_sum / static_cast<double>(records.size()),
                              static_cast<double>(token_correct) /
                                  static_cast<double>(std::max<std::size_t>(token_total, 1))});
    }
    return result;
}

// --- evaluation-mode measurements ---------------------------------------

inline double answering_accuracy(const ModelParams& params, const ModelConfig& cfg,
                                 const std::vector<ExplanationRecord>& records,
                                 const std::map<std::string, Tensor>& features,
                                 const VocabSet& vocab) {
    detail::check_dataset(records, features);
    Rng rng(0);  // unused in eval mode
    std::size_t correct = 0;
    for (const auto& r : records) {
        Graph g;
        BoundParams bp(g, params);
        const std::vector<int> q =
            r.question ? vocab.question_words.encode(*r.question) : std::vector<int>{};
        const AnsweringTrace trace =
            answering_forward(g, bp, cfg, features.at(r.image_id), q, false, rng);
        if (detail::argmax(g.value(trace.logits)) ==
            static_cast<std::size_t>(vocab.answers.id(r.answer)))
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(records.size());
}

inline double explainer_token_accuracy(const ModelParams& params, const ModelConfig& cfg,
                                       const std::vector<ExplanationRecord>& records,
                                       const std::map<std::string, Tensor>& features,
                                       const VocabSet& vocab) {
    detail::check_dataset(records, features);
    Rng rng(0);
    std::size_t correct = 0, total = 0;
    for (const auto& r : records) {
        Graph g;
        BoundParams bp(g, params);
        const std::vector<int> q =
            r.question ? vocab.question_words.encode(*r.question) : std::vector<int>{};
        const AnsweringTrace trace =
            answering_forward(g, bp, cfg, features.at(r.image_id), q, false, rng);
        const std::size_t gt = static_cast<std::size_t>(vocab.answers.id(r.answer));
        const NodeId answer_input = g.leaf(answer_one_hot(gt, cfg.answer_count));
        const ExplainerTrace et = explainer_forward(g, bp, cfg, trace, answer_input, false, rng);
        const std::vector<int> tokens =
            vocab.explanation_words.encode_justification(r.explanations.front());
        const std::vector<NodeId> steps = decode_teacher_forced(g, bp, cfg, et.context, tokens);
        for (std::size_t t = 0; t < steps.size(); ++t, ++total)
            if (detail::argmax(g.value(steps[t])) == static_cast<std::size_t>(tokens[t])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(total, 1));
}

inline double greedy_match_rate(const ModelParams& params, const ModelConfig& cfg,
                                const std::vector<ExplanationRecord>& records,
                                const std::map<std::string, Tensor>& features,
                                const VocabSet& vocab, std::size_t max_len = 24) {
    detail::check_dataset(records, features);
    Rng rng(0);
    std::size_t exact = 0;
    for (const auto& r : records) {
        Graph g;
        BoundParams bp(g, params);
        const std::vector<int> q =
            r.question ? vocab.question_words.encode(*r.question) : std::vector<int>{};
        const AnsweringTrace trace =
            answering_forward(g, bp, cfg, features.at(r.image_id), q, false, rng);
        const std::size_t gt = static_cast<std::size_t>(vocab.answers.id(r.answer));
        const NodeId answer_input = g.leaf(answer_one_hot(gt, cfg.answer_count));
        const ExplainerTrace et = explainer_forward(g, bp, cfg, trace, answer_input, false, rng);
        if (decode_greedy(g, bp, cfg, et.context, max_len) ==
            vocab.explanation_words.encode_justification(r.explanations.front()))
            ++exact;
    }
    return static_cast<double>(exact) / static_cast<double>(records.size());
}

}  // namespace pjx
