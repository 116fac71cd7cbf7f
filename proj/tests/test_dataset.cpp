#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "pjx/dataset.hpp"

using namespace pjx;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("pjx_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("tokenizer lowercases and strips punctuation") {
    CHECK(tokenize("Is this a Healthy Meal?") ==
          std::vector<std::string>{"is", "this", "a", "healthy", "meal"});
    CHECK(tokenize("  hot-dog, with    toppings!  ") ==
          std::vector<std::string>{"hot", "dog", "with", "toppings"});
    CHECK(tokenize("").empty());
}

TEST_CASE("records round trip through json lines") {
    std::vector<ExplanationRecord> records;
    ExplanationRecord r;
    r.id = "i0001";
    r.image_id = "img0001";
    r.split = "train";
    r.question = "which color is the marker";
    r.answer = "red";
    r.explanations = {"the red marker sits in the northwest corner"};
    r.complementary_pair_id = "p0000";
    r.mask_paths = {"masks/i0001_0.pjxt"};
    records.push_back(r);
    r.id = "i0002";
    r.image_id = "img0002";
    r.complementary_pair_id.reset();
    r.mask_paths.clear();
    records.push_back(r);

    const auto dir = temp_dir("records");
    save_records(dir / "records.jsonl", records);
    const LoadResult loaded = load_records(dir / "records.jsonl", "vqa");
    CHECK(loaded.rejections.empty());
    CHECK(loaded.records == records);
}

TEST_CASE("activity records must not carry questions") {
    const auto dir = temp_dir("act_records");
    std::ofstream out(dir / "records.jsonl");
    out << R"({"id":"a1","image_id":"m1","split":"train","answer":"biking","explanations":["he rides a bike on a mountain path"]})"
        << "\n";
    out << R"({"id":"a2","image_id":"m2","split":"train","question":"what","answer":"biking","explanations":["he rides"]})"
        << "\n";
    out.close();

    const LoadResult loaded = load_records(dir / "records.jsonl", "act");
    CHECK(loaded.records.size() == 1);
    REQUIRE(loaded.rejections.size() == 1);
    CHECK(loaded.rejections[0].line == 2);
    CHECK(loaded.rejections[0].message.find("question") != std::string::npos);
}

TEST_CASE("one malformed record is rejected at the right line") {
    const auto dir = temp_dir("reject");
    std::ofstream out(dir / "records.jsonl");
    const char* good =
        R"({"id":"i%d","image_id":"m%d","split":"train","question":"q","answer":"yes","explanations":["e"]})";
    char buf[256];
    for (int i = 1; i <= 2; ++i) {
        std::snprintf(buf, sizeof buf, good, i, i);
        out << buf << "\n";
    }
    out << R"({"id":"i3","image_id":"m3","split":"train","question":"q","explanations":["e"]})" << "\n";
    for (int i = 4; i <= 5; ++i) {
        std::snprintf(buf, sizeof buf, good, i, i);
        out << buf << "\n";
    }
    out.close();

    const LoadResult loaded = load_records(dir / "records.jsonl", "vqa");
    CHECK(loaded.records.size() == 4);
    REQUIRE(loaded.rejections.size() == 1);
    CHECK(loaded.rejections[0].line == 3);
    CHECK(loaded.rejections[0].message.find("answer") != std::string::npos);
}

TEST_CASE("malformed json is a rejection, not a crash") {
    const auto dir = temp_dir("badjson");
    std::ofstream out(dir / "records.jsonl");
    out << "{not json\n";
    out.close();
    const LoadResult loaded = load_records(dir / "records.jsonl", "vqa");
    CHECK(loaded.records.empty());
    REQUIRE(loaded.rejections.size() == 1);
    CHECK(loaded.rejections[0].line == 1);
}

TEST_CASE("answer vocabulary keeps the most frequent labels") {
    std::vector<ExplanationRecord> records;
    auto push = [&](const std::string& answer, int copies) {
        for (int i = 0; i < copies; ++i) {
            ExplanationRecord r;
            r.id = answer + std::to_string(records.size());
            r.image_id = r.id;
            r.split = "train";
            r.question = "q";
            r.answer = answer;
            r.explanations = {"e"};
            records.push_back(r);
        }
    };
    push("a", 3);
    push("b", 2);
    push("c", 1);

    const Vocabulary top2 = build_answer_vocab(records, 2);
    CHECK(top2.entries() == std::vector<std::string>{"a", "b"});

    CHECK_THROWS_AS(build_answer_vocab({}, 3), ValidationError);
}

TEST_CASE("answer vocabulary breaks frequency ties lexicographically") {
    std::vector<ExplanationRecord> records;
    auto push = [&](const std::string& answer, int copies) {
        for (int i = 0; i < copies; ++i) {
            ExplanationRecord r;
            r.id = answer + std::to_string(records.size());
            r.image_id = r.id;
            r.split = "train";
            r.question = "q";
            r.answer = answer;
            r.explanations = {"e"};
            records.push_back(r);
        }
    };
    push("b", 2);
    push("a", 2);
    const Vocabulary top1 = build_answer_vocab(records, 1);
    CHECK(top1.entries() == std::vector<std::string>{"a"});

    // rebuilding from the same records is identical
    CHECK(build_answer_vocab(records, 1).entries() == top1.entries());
}

TEST_CASE("word vocabulary reserves control ids and maps unknowns") {
    const Vocabulary v = build_word_vocab({"the cat sat", "the cat ran", "a dog"}, 2);
    CHECK(v.word(0) == "<bos>");
    CHECK(v.word(1) == "<eos>");
    CHECK(v.word(2) == "<unk>");
    CHECK(v.id("cat") >= 3);
    CHECK(v.id("the") >= 3);
    CHECK(v.id("dog") == kUnkId);  // below min_count
    CHECK(v.find("dog") == std::nullopt);

    const std::vector<int> ids = v.encode_justification("the cat sat");
    CHECK(ids.back() == kEosId);
    CHECK(v.decode(ids) == "the cat sat");
}

TEST_CASE("mask aggregation normalizes annotator counts") {
    Tensor a({1, 2});
    a.at(0, 0) = 1.0;
    Tensor b({1, 2});
    b.at(0, 0) = 1.0;
    b.at(0, 1) = 1.0;
    const Tensor heat = aggregate_masks({a, b});
    CHECK(heat.at(0, 0) == Catch::Approx(2.0 / 3.0).margin(1e-15));
    CHECK(heat.at(0, 1) == Catch::Approx(1.0 / 3.0).margin(1e-15));

    Tensor k({3, 3});
    k.at(0, 0) = k.at(1, 1) = k.at(2, 2) = 1.0;
    const Tensor single = aggregate_masks({k});
    for (int i = 0; i < 3; ++i) CHECK(single.at(i, i) == Catch::Approx(1.0 / 3.0).margin(1e-15));

    CHECK_THROWS_AS(aggregate_masks({}), ContractError);
    CHECK_THROWS_AS(aggregate_masks({Tensor({2, 2})}), ContractError);  // all zero
    CHECK_THROWS_AS(aggregate_masks({a, Tensor({2, 2})}), ShapeError);
    Tensor bad({1, 2});
    bad.at(0, 0) = 0.5;
    CHECK_THROWS_AS(aggregate_masks({bad}), ContractError);
}

TEST_CASE("mask aggregation is unit mass and monotone on seeded triples") {
    Rng rng(101);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Tensor> masks;
        for (int k = 0; k < 3; ++k) {
            Tensor m({6, 6});
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
            if (m.sum() == 0.0) m[0] = 1.0;
            masks.push_back(std::move(m));
        }
        const Tensor heat = aggregate_masks(masks);
        CHECK(std::fabs(heat.sum() - 1.0) < 1e-12);

        // adding a mask never decreases the relative weight of its own cells
        Tensor extra({6, 6});
        for (std::size_t i = 0; i < extra.size(); ++i) extra[i] = rng.bernoulli(0.25) ? 1.0 : 0.0;
        if (extra.sum() == 0.0) extra[3] = 1.0;
        auto weight_on = [&](const Tensor& h, const Tensor& cells) {
            double w = 0.0;
            for (std::size_t i = 0; i < h.size(); ++i)
                if (cells[i] != 0.0) w += h[i];
            return w;
        };
        std::vector<Tensor> grown = masks;
        grown.push_back(extra);
        CHECK(weight_on(aggregate_masks(grown), extra) >= weight_on(heat, extra) - 1e-12);
    }
}

TEST_CASE("feature loading validates shape and container") {
    const auto dir = temp_dir("features");
    Tensor feat({4, 3, 3}, 0.5);
    save_pjxt(dir / "imgX.pjxt", feat);
    CHECK(load_features("imgX", dir) == feat);

    CHECK_THROWS_MATCHES(load_features("absent", dir), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("absent")));

    save_pjxt(dir / "rank2.pjxt", Tensor({3, 3}, 1.0));
    CHECK_THROWS_MATCHES(load_features("rank2", dir), IoError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("rank 2") &&
                             Catch::Matchers::ContainsSubstring("expected 3")));

    // truncated file reports corruption rather than crashing
    std::ofstream trunc(dir / "short.pjxt", std::ios::binary);
    trunc << "PJXT";
    trunc.close();
    CHECK_THROWS_AS(load_features("short", dir), IoError);
}

TEST_CASE("vocab set round trips and hashes stably") {
    SynthConfig cfg;
    cfg.count = 8;
    const SynthData data = synth_dataset(cfg);
    const VocabSet vocab = build_vocab(data.records, 3000, 1);
    CHECK(vocab.answers.size() == 4);
    CHECK(vocab.explanation_words.size() <= 40);

    const auto dir = temp_dir("vocab");
    save_vocab(dir / "vocab.json", vocab);
    const VocabSet back = load_vocab(dir / "vocab.json");
    CHECK(back.answers == vocab.answers);
    CHECK(back.question_words == vocab.question_words);
    CHECK(back.explanation_words == vocab.explanation_words);
    CHECK(vocab_hash(back) == vocab_hash(vocab));
}

TEST_CASE("synthetic corpus is deterministic and valid") {
    SynthConfig cfg;
    cfg.count = 10;
    cfg.seed = 5;
    const SynthData a = synth_dataset(cfg);
    const SynthData b = synth_dataset(cfg);
    CHECK(a.records == b.records);
    CHECK(a.features == b.features);

    cfg.seed = 6;
    const SynthData c = synth_dataset(cfg);
    CHECK(a.records != c.records);

    const auto dir = temp_dir("synth");
    write_synth_dataset(dir, a);
    const LoadResult loaded = load_records(dir / "records.jsonl", "vqa");
    CHECK(loaded.rejections.empty());
    CHECK(loaded.records == a.records);

    for (const auto& rec : a.records) {
        CHECK(rec.explanations.size() == 1);
        CHECK(a.features.count(rec.image_id) == 1);
        CHECK(a.masks.at(rec.id).size() == 3);
    }
}

TEST_CASE("synthetic answers are decodable from the annotated region") {
    SynthConfig cfg;
    cfg.count = 40;
    cfg.seed = 17;
    const SynthData data = synth_dataset(cfg);
    for (const auto& rec : data.records) {
        const Tensor& feat = data.features.at(rec.image_id);
        const Tensor& block = data.masks.at(rec.id)[0];  // tightest annotation
        // probe: sum each marker channel over the annotated block, pick the max
        std::size_t best = 0;
        double best_v = -1.0;
        for (std::size_t ch = 0; ch < 4; ++ch) {
            double v = 0.0;
            for (std::size_t n = 0; n < cfg.grid; ++n)
                for (std::size_t m = 0; m < cfg.grid; ++m)
                    if (block.at(n, m) != 0.0) v += feat.at(ch, n, m);
            if (v > best_v) {
                best_v = v;
                best = ch;
            }
        }
        CHECK(synth_colors()[best] == rec.answer);
    }
}

TEST_CASE("synthetic complementary pairs share layout but differ in answer") {
    SynthConfig cfg;
    cfg.count = 12;
    cfg.seed = 23;
    const SynthData data = synth_dataset(cfg);
    for (std::size_t i = 0; i + 1 < data.records.size(); i += 2) {
        const auto& even = data.records[i];
        const auto& odd = data.records[i + 1];
        REQUIRE(even.complementary_pair_id.has_value());
        CHECK(even.complementary_pair_id == odd.complementary_pair_id);
        CHECK(even.answer != odd.answer);
    }
}
