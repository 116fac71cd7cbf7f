#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "pjx/answering.hpp"
#include "pjx/training.hpp"

using namespace pjx;

namespace {

ModelConfig micro_cfg() {
    ModelConfig cfg = ModelConfig::desk();
    cfg.feature_channels = 3;
    cfg.grid_n = 1;
    cfg.grid_m = 2;
    cfg.question_vocab = 5;
    cfg.question_embed = 3;
    cfg.question_hidden = 4;
    cfg.pool_dim = 4;
    cfg.attn_hidden = 3;
    cfg.answer_count = 3;
    return cfg;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

}  // namespace

TEST_CASE("question encoding with zero parameters is zero") {
    ModelConfig cfg = micro_cfg();
    Rng rng(1);
    ModelParams params = init_answering_params(cfg, rng);
    for (const char* name : {"ans.lstm1.wx", "ans.lstm1.wh", "ans.lstm1.b", "ans.lstm2.wx",
                             "ans.lstm2.wh", "ans.lstm2.b"}) {
        Tensor& t = params.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    }
    Graph g;
    BoundParams bp(g, params);
    const NodeId enc = encode_question(g, bp, cfg, {1, 2, 3});
    for (std::size_t i = 0; i < cfg.question_hidden; ++i) CHECK(g.value(enc)[i] == 0.0);
}

TEST_CASE("question encoding is order and length sensitive on seeded weights") {
    ModelConfig cfg = micro_cfg();
    Rng rng(2);
    const ModelParams params = init_answering_params(cfg, rng);

    auto encode = [&](const std::vector<int>& ids) {
        Graph g;
        BoundParams bp(g, params);
        return g.value(encode_question(g, bp, cfg, ids));
    };
    CHECK(encode({1, 2, 3}).values() != encode({3, 2, 1}).values());
    CHECK(encode({4}).values() != encode({4, 4, 4, 4, 4}).values());

    Graph g;
    BoundParams bp(g, params);
    CHECK_THROWS_AS(encode_question(g, bp, cfg, {}), ContractError);
    CHECK_THROWS_MATCHES(encode_question(g, bp, cfg, {7}), ContractError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("7")));
}

TEST_CASE("ones question representation") {
    Graph g;
    const Tensor& ones = g.value(ones_question(g, 3));
    CHECK(ones.values() == std::vector<double>{1, 1, 1});
    CHECK_THROWS_AS(ones_question(g, 0), ContractError);
}

TEST_CASE("activity pipeline ignores question tokens entirely") {
    ModelConfig cfg = micro_cfg();
    cfg.mode = "act";
    Rng rng(3);
    const ModelParams params = init_answering_params(cfg, rng);
    const Tensor features = random_tensor({3, 1, 2}, rng);

    auto run = [&](const std::vector<int>& q) {
        Graph g;
        BoundParams bp(g, params);
        Rng dropout_rng(0);
        return g.value(answering_forward(g, bp, cfg, features, q, false, dropout_rng));
    };
    // forward never reads the tokens; output depends on the image only
    CHECK(run({}).values() == run({1, 2, 3}).values());
}

TEST_CASE("pooling with identity projections hits the normalization fixed point") {
    // C' = C = H and identity projections: ones image, ones question ->
    // every location collapses to 1/sqrt(C')
    ModelConfig cfg = micro_cfg();
    cfg.mode = "act";
    cfg.feature_channels = 4;
    cfg.question_hidden = 4;
    cfg.pool_dim = 4;
    Rng rng(4);
    ModelParams params = init_answering_params(cfg, rng);
    params.at("ans.img_proj.w") = identity(4);
    params.at("ans.img_proj.b") = Tensor({4});
    params.at("ans.q_proj.w") = identity(4);
    params.at("ans.q_proj.b") = Tensor({4});

    Graph g;
    BoundParams bp(g, params);
    Rng drop(0);
    const NodeId feats = g.leaf(Tensor({4, 1, 2}, 1.0));
    const NodeId q = ones_question(g, 4);
    const NodeId pooled = pool_iq(g, bp, cfg, feats, q, false, drop);
    for (std::size_t i = 0; i < g.value(pooled).size(); ++i)
        CHECK(g.value(pooled)[i] == Catch::Approx(0.5).margin(1e-12));  // 1/sqrt(4)
}

TEST_CASE("zero question projection annihilates the pooled map") {
    ModelConfig cfg = micro_cfg();
    Rng rng(5);
    ModelParams params = init_answering_params(cfg, rng);
    Tensor& w = params.at("ans.q_proj.w");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    params.at("ans.q_proj.b") = Tensor({cfg.pool_dim});

    Graph g;
    BoundParams bp(g, params);
    Rng drop(0);
    const NodeId feats = g.leaf(random_tensor({3, 1, 2}, rng));
    const NodeId q = encode_question(g, bp, cfg, {1, 2});
    const NodeId pooled = pool_iq(g, bp, cfg, feats, q, false, drop);
    for (std::size_t i = 0; i < g.value(pooled).size(); ++i) CHECK(g.value(pooled)[i] == 0.0);
}

TEST_CASE("pooled locations have unit norm on seeded inputs") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.question_vocab = 6;
    Rng rng(6);
    const ModelParams params = init_answering_params(cfg, rng);
    for (int trial = 0; trial < 5; ++trial) {
        Graph g;
        BoundParams bp(g, params);
        Rng drop(0);
        const NodeId feats =
            g.leaf(random_tensor({cfg.feature_channels, cfg.grid_n, cfg.grid_m}, rng));
        const NodeId q = encode_question(g, bp, cfg, {3, 4, 5});
        const Tensor& pooled = g.value(pool_iq(g, bp, cfg, feats, q, false, drop));
        for (std::size_t n = 0; n < cfg.grid_n; ++n)
            for (std::size_t m = 0; m < cfg.grid_m; ++m) {
                double sq = 0.0;
                for (std::size_t c = 0; c < cfg.pool_dim; ++c)
                    sq += pooled.at(c, n, m) * pooled.at(c, n, m);
                CHECK(std::fabs(std::sqrt(sq) - 1.0) < 1e-9);
            }
    }
}

TEST_CASE("answer attention with zero weights is uniform") {
    ModelConfig cfg = micro_cfg();
    Rng rng(7);
    ModelParams params = init_answering_params(cfg, rng);
    for (const char* name : {"ans.att1.w", "ans.att1.b", "ans.att2.w", "ans.att2.b"}) {
        Tensor& t = params.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    }
    Graph g;
    BoundParams bp(g, params);
    const NodeId pooled = g.leaf(random_tensor({cfg.pool_dim, 1, 2}, rng));
    const Tensor& map = g.value(answer_attention(g, bp, pooled));
    CHECK(map.at(0, 0) == 0.5);
    CHECK(map.at(0, 1) == 0.5);
}

TEST_CASE("answer attention is a positive distribution on a seeded instance") {
    ModelConfig cfg = ModelConfig::desk();
    cfg.question_vocab = 6;
    Rng rng(8);
    const ModelParams params = init_answering_params(cfg, rng);
    Graph g;
    BoundParams bp(g, params);
    const NodeId pooled = g.leaf(random_tensor({cfg.pool_dim, cfg.grid_n, cfg.grid_m}, rng));
    const Tensor& map = g.value(answer_attention(g, bp, pooled));
    double total = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) {
        CHECK(map[i] > 0.0);
        total += map[i];
    }
    CHECK(std::fabs(total - 1.0) <= 1e-9);
}

TEST_CASE("scaling attention weights preserves the argmax cell") {
    // nonnegative first layer keeps the pre-ReLU sign, so a uniform positive
    // rescaling of both layers is a monotone map of the per-cell logits
    ModelConfig cfg = ModelConfig::desk();
    cfg.question_vocab = 6;
    Rng rng(9);
    ModelParams params = init_answering_params(cfg, rng);
    for (const char* name : {"ans.att1.w", "ans.att1.b", "ans.att2.w"}) {
        Tensor& t = params.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::fabs(t[i]);
    }
    const Tensor pooled_v =
        random_tensor({cfg.pool_dim, cfg.grid_n, cfg.grid_m}, rng, 0.0, 1.0);

    auto argmax_cell = [&](double scale) {
        ModelParams scaled = params;
        for (const char* name : {"ans.att1.w", "ans.att1.b", "ans.att2.w", "ans.att2.b"}) {
            Tensor& t = scaled.at(name);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] *= scale;
        }
        Graph g;
        BoundParams bp(g, scaled);
        const Tensor& map = g.value(answer_attention(g, bp, g.leaf(pooled_v)));
        std::size_t best = 0;
        for (std::size_t i = 1; i < map.size(); ++i)
            if (map[i] > map[best]) best = i;
        return best;
    };
    CHECK(argmax_cell(1.0) == argmax_cell(3.0));
}

TEST_CASE("zero classifier weights pass the bias through") {
    ModelConfig cfg = micro_cfg();
    Rng rng(10);
    ModelParams params = init_answering_params(cfg, rng);
    Tensor& w = params.at("ans.cls.w");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.0;
    params.at("ans.cls.b") = Tensor::vector({0.3, -0.1, 2.0});

    Graph g;
    BoundParams bp(g, params);
    Rng drop(0);
    const NodeId attended = g.leaf(random_tensor({cfg.feature_channels}, rng));
    const NodeId q = encode_question(g, bp, cfg, {1});
    const Tensor& logits = g.value(predict_answer(g, bp, cfg, attended, q, false, drop));
    CHECK(logits.values() == std::vector<double>{0.3, -0.1, 2.0});
}

TEST_CASE("argmax is invariant to a constant added to all logits") {
    Rng rng(11);
    Tensor logits = random_tensor({6}, rng);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += 5.25;
    std::size_t best2 = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best2]) best2 = i;
    CHECK(best == best2);
}

TEST_CASE("answer log-likelihood gradients match finite differences end to end") {
    const ModelConfig cfg = micro_cfg();
    Rng rng(12);
    const ModelParams params = init_answering_params(cfg, rng);
    const Tensor features = random_tensor({3, 1, 2}, rng);
    const std::vector<int> question{1, 3};

    auto loss_with_param = [&](const std::string& name) {
        return [&, name](Graph& g, NodeId x) {
            BoundParams bp(g, params, {{name, x}});
            Rng drop(0);
            const AnsweringTrace t = answering_forward(g, bp, cfg, features, question, false, drop);
            return answer_loss(g, t.logits, 1);
        };
    };
    for (const char* name : {"ans.img_proj.w", "ans.q_proj.w", "ans.att1.w", "ans.att2.w",
                             "ans.fuse_img.w", "ans.fuse_q.w", "ans.cls.w", "ans.cls.b",
                             "ans.lstm1.wx", "ans.lstm2.wh", "ans.word_embed"}) {
        const double err = finite_diff_check(loss_with_param(name), params.at(name));
        INFO(name);
        CHECK(err <= 1e-4);
    }

    // and through the image features
    const double feat_err = finite_diff_check(
        [&](Graph& g, NodeId x) {
            BoundParams bp(g, params);
            Rng drop(0);
            const AnsweringTrace t =
                answering_forward_node(g, bp, cfg, x, question, false, drop);
            return answer_loss(g, t.logits, 2);
        },
        features);
    CHECK(feat_err <= 1e-4);
}
