// Dataset schema, tokenization, vocabulary building, annotator-mask
// aggregation, feature loading, and the synthetic desk-scale corpus.
#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "pjx/common.hpp"
#include "pjx/tensor.hpp"

namespace pjx {

// Lowercase, punctuation stripped, whitespace split. Shared by dataset
// preparation and the text metrics so there is no train/eval skew.
inline std::vector<std::string> tokenize(const std::string& text) {
    std::string clean;
    clean.reserve(text.size());
    for (unsigned char c : text) {
        if (std::isalnum(c))
            clean.push_back(static_cast<char>(std::tolower(c)));
        else
            clean.push_back(' ');
    }
    std::vector<std::string> tokens;
    std::istringstream in(clean);
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    return tokens;
}

struct ExplanationRecord {
    std::string id;
    std::string image_id;
    std::string split;  // train | val | test
    std::optional<std::string> question;
    std::string answer;
    std::vector<std::string> explanations;  // 1..3
    std::optional<std::string> complementary_pair_id;
    std::vector<std::string> mask_paths;

    bool operator==(const ExplanationRecord&) const = default;
};

inline nlohmann::json to_json(const ExplanationRecord& r) {
    nlohmann::json j{{"id", r.id},
                     {"image_id", r.image_id},
                     {"split", r.split},
                     {"answer", r.answer},
                     {"explanations", r.explanations}};
    if (r.question) j["question"] = *r.question;
    if (r.complementary_pair_id) j["complementary_pair_id"] = *r.complementary_pair_id;
    if (!r.mask_paths.empty()) j["masks"] = r.mask_paths;
    return j;
}

struct LoadRejection {
    std::size_t line;
    std::string message;
};

struct LoadResult {
    std::vector<ExplanationRecord> records;
    std::vector<LoadRejection> rejections;
};

// JSON-lines loader. Malformed lines are rejected with their line number, not
// fatal; an unreadable file is.
inline LoadResult load_records(const std::filesystem::path& path, const std::string& mode) {
    if (mode != "vqa" && mode != "act")
        throw ValidationError("mode must be vqa or act, got " + mode);
    std::ifstream in(path);
    if (!in) throw IoError("cannot open records file " + path.string());
    LoadResult result;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto reject = [&](const std::string& msg) {
            result.rejections.push_back({line_no, "line " + std::to_string(line_no) + ": " + msg});
        };
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            reject("malformed JSON");
            continue;
        }
        ExplanationRecord r;
        bool bad = false;
        auto need_string = [&](const char* field, std::string& out) {
            if (!j.contains(field) || !j[field].is_string() ||
                j[field].get<std::string>().empty()) {
                reject(std::string("missing or empty required field '") + field + "'");
                bad = true;
                return;
            }
            out = j[field].get<std::string>();
        };
        need_string("id", r.id);
        need_string("image_id", r.image_id);
        need_string("split", r.split);
        need_string("answer", r.answer);
        if (bad) continue;
        if (r.split != "train" && r.split != "val" && r.split != "test") {
            reject("split must be train, val, or test, got '" + r.split + "'");
            continue;
        }
        if (!j.contains("explanations") || !j["explanations"].is_array() ||
            j["explanations"].empty() || j["explanations"].size() > 3) {
            reject("field 'explanations' must be an array of 1 to 3 strings");
            continue;
        }
        for (const auto& e : j["explanations"]) {
            if (!e.is_string() || e.get<std::string>().empty()) {
                reject("field 'explanations' must contain non-empty strings");
                bad = true;
                break;
            }
            r.explanations.push_back(e.get<std::string>());
        }
        if (bad) continue;
        if (mode == "act") {
            if (j.contains("question")) {
                reject("activity records must not carry a 'question' field");
                continue;
            }
        } else {
            if (!j.contains("question") || !j["question"].is_string() ||
                j["question"].get<std::string>().empty()) {
                reject("missing or empty required field 'question'");
                continue;
            }
            r.question = j["question"].get<std::string>();
        }
        if (j.contains("complementary_pair_id"))
            r.complementary_pair_id = j["complementary_pair_id"].get<std::string>();
        if (j.contains("masks"))
            for (const auto& m : j["masks"]) r.mask_paths.push_back(m.get<std::string>());
        result.records.push_back(std::move(r));
    }
    return result;
}

inline void save_records(const std::filesystem::path& path,
                         const std::vector<ExplanationRecord>& records) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write records file " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << "\n";
}

// Ordered word list. Word vocabularies reserve ids 0..2 for the begin, end,
// and unknown markers; label vocabularies (answers) are plain ordered lists.
class Vocabulary {
public:
    static Vocabulary words(const std::vector<std::string>& ordered) {
        Vocabulary v;
        v.reserved_ = true;
        v.entries_ = {"<bos>", "<eos>", "<unk>"};
        v.entries_.insert(v.entries_.end(), ordered.begin(), ordered.end());
        v.rebuild_index();
        return v;
    }

    static Vocabulary labels(const std::vector<std::string>& ordered) {
        Vocabulary v;
        v.reserved_ = false;
        v.entries_ = ordered;
        v.rebuild_index();
        return v;
    }

    bool reserved() const { return reserved_; }
    std::size_t size() const { return entries_.size(); }

    std::optional<int> find(const std::string& w) const {
        auto it = index_.find(w);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    // Word vocabularies map missing words to <unk>; label vocabularies throw.
    int id(const std::string& w) const {
        if (auto found = find(w)) return *found;
        if (reserved_) return kUnkId;
        throw ContractError("label '" + w + "' not in vocabulary");
    }

    const std::string& word(std::size_t id) const { return entries_.at(id); }
    const std::vector<std::string>& entries() const { return entries_; }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
        return ids;
    }

    // Content ids followed by the terminal end id, ready for the decoder.
    std::vector<int> encode_justification(const std::string& text) const {
        std::vector<int> ids = encode(text);
        ids.push_back(kEosId);
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id == kEosId && reserved_) break;
            if (!out.empty()) out += ' ';
            out += word(static_cast<std::size_t>(id));
        }
        return out;
    }

    bool operator==(const Vocabulary&) const = default;

private:
    void rebuild_index() {
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i)
            index_[entries_[i]] = static_cast<int>(i);
        if (index_.size() != entries_.size())
            throw ContractError("vocabulary contains duplicate entries");
    }

    bool reserved_ = true;
    std::vector<std::string> entries_;
    std::unordered_map<std::string, int> index_;
};

namespace detail {

// Frequency-descending with lexicographic tie-break; deterministic.
inline std::vector<std::string> order_by_count(const std::map<std::string, std::size_t>& counts) {
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> out;
    out.reserve(items.size());
    for (auto& [w, c] : items) out.push_back(w);
    return out;
}

}  // namespace detail

// Top-k most frequent answer labels.
inline Vocabulary build_answer_vocab(const std::vector<ExplanationRecord>& records,
                                     std::size_t top_k) {
    if (records.empty()) throw ValidationError("cannot build a vocabulary from an empty dataset");
    std::map<std::string, std::size_t> counts;
    for (const auto& r : records) ++counts[r.answer];
    std::vector<std::string> ordered = detail::order_by_count(counts);
    if (ordered.size() > top_k) ordered.resize(top_k);
    return Vocabulary::labels(ordered);
}

// Words with count >= min_count across the given texts.
inline Vocabulary build_word_vocab(const std::vector<std::string>& texts, std::size_t min_count) {
    if (texts.empty()) throw ValidationError("cannot build a vocabulary from an empty dataset");
    std::map<std::string, std::size_t> counts;
    for (const auto& t : texts)
        for (const auto& tok : tokenize(t)) ++counts[tok];
    for (auto it = counts.begin(); it != counts.end();)
        it = it->second < min_count ? counts.erase(it) : std::next(it);
    return Vocabulary::words(detail::order_by_count(counts));
}

struct VocabSet {
    Vocabulary answers = Vocabulary::labels({});
    Vocabulary question_words = Vocabulary::words({});
    Vocabulary explanation_words = Vocabulary::words({});
};

inline VocabSet build_vocab(const std::vector<ExplanationRecord>& records, std::size_t answer_top_k,
                            std::size_t expl_min_count) {
    if (records.empty()) throw ValidationError("cannot build a vocabulary from an empty dataset");
    VocabSet v;
    v.answers = build_answer_vocab(records, answer_top_k);
    std::vector<std::string> questions;
    std::vector<std::string> explanations;
    for (const auto& r : records) {
        if (r.question) questions.push_back(*r.question);
        for (const auto& e : r.explanations) explanations.push_back(e);
    }
    if (!questions.empty()) v.question_words = build_word_vocab(questions, 1);
    v.explanation_words = build_word_vocab(explanations, expl_min_count);
    return v;
}

inline nlohmann::json to_json(const VocabSet& v) {
    return nlohmann::json{{"answers", v.answers.entries()},
                          {"question_words", v.question_words.entries()},
                          {"explanation_words", v.explanation_words.entries()}};
}

inline void save_vocab(const std::filesystem::path& path, const VocabSet& v) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary file " + path.string());
    out << to_json(v).dump(2) << "\n";
}

inline VocabSet load_vocab(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed vocabulary file " + path.string() + ": " + e.what());
    }
    VocabSet v;
    v.answers = Vocabulary::labels(j.at("answers").get<std::vector<std::string>>());
    auto strip_reserved = [](std::vector<std::string> words) {
        // stored lists include the reserved markers at the front
        if (words.size() < 3) throw IoError("word vocabulary missing reserved entries");
        return std::vector<std::string>(words.begin() + 3, words.end());
    };
    v.question_words =
        Vocabulary::words(strip_reserved(j.at("question_words").get<std::vector<std::string>>()));
    v.explanation_words = Vocabulary::words(
        strip_reserved(j.at("explanation_words").get<std::vector<std::string>>()));
    return v;
}

inline std::string vocab_hash(const VocabSet& v) { return hex64(fnv1a64(to_json(v).dump())); }

// Cellwise sum of binary annotator masks normalized into a unit-mass heatmap.
inline Tensor aggregate_masks(const std::vector<Tensor>& masks) {
    if (masks.empty()) throw ContractError("aggregate_masks: need at least one mask");
    const Shape& shape = masks.front().shape();
    if (shape.size() != 2)
        throw ShapeError("aggregate_masks: masks must be rank 2, got " + shape_str(shape));
    Tensor heat(shape);
    for (const auto& m : masks) {
        if (m.shape() != shape)
            throw ShapeError("aggregate_masks: mask shape " + shape_str(m.shape()) +
                             " differs from " + shape_str(shape));
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i] != 0.0 && m[i] != 1.0)
                throw ContractError("aggregate_masks: mask values must be 0 or 1, got " +
                                    std::to_string(m[i]));
            heat[i] += m[i];
        }
    }
    const double total = heat.sum();
    if (total <= 0.0) throw ContractError("aggregate_masks: no cell annotated in any mask");
    for (std::size_t i = 0; i < heat.size(); ++i) heat[i] /= total;
    return heat;
}

// Precomputed spatial features stored as <image_id>.pjxt, rank 3 (C x N x M).
inline Tensor load_features(const std::string& image_id, const std::filesystem::path& feature_dir) {
    const auto path = feature_dir / (image_id + ".pjxt");
    if (!std::filesystem::exists(path))
        throw IoError("missing feature file " + path.string());
    Tensor t = load_pjxt(path);
    if (t.ndim() != 3)
        throw IoError("feature tensor " + path.string() + " has rank " +
                      std::to_string(t.ndim()) + ", expected 3");
    return t;
}

// --- synthetic corpus ---------------------------------------------------
//
// Each instance hides a 2x2 marker block inside one quadrant of the grid. The
// marker's channel determines the answer (a color word); the quadrant carries
// a constant signature channel, so locating the marker is the only way to
// recover the quadrant word used in the justification. Annotator masks cover
// the block, the block plus a halo, and the whole quadrant.

struct SynthConfig {
    std::size_t count = 50;
    std::size_t channels = 16;  // >= 8
    std::size_t grid = 14;
    std::string mode = "vqa";
    std::uint64_t seed = 1;
};

struct SynthData {
    std::vector<ExplanationRecord> records;
    std::map<std::string, Tensor> features;           // by image id
    std::map<std::string, std::vector<Tensor>> masks;  // by record id, one per annotator
};

inline const std::vector<std::string>& synth_colors() {
    static const std::vector<std::string> colors{"red", "green", "blue", "yellow"};
    return colors;
}

inline const std::vector<std::string>& synth_quadrants() {
    static const std::vector<std::string> quads{"northwest", "northeast", "southwest",
                                                "southeast"};
    return quads;
}

inline SynthData synth_dataset(const SynthConfig& cfg) {
    if (cfg.count < 1 || cfg.channels < 8 || cfg.grid < 4)
        throw ValidationError("synthetic dataset needs count >= 1, channels >= 8, grid >= 4");
    Rng rng(cfg.seed);
    SynthData data;
    const std::size_t g = cfg.grid;
    const std::size_t half = g / 2;
    std::size_t prev_quadrant = 0, prev_answer = 0;
    for (std::size_t i = 0; i < cfg.count; ++i) {
        std::size_t answer, quadrant;
        if (i % 2 == 0) {
            answer = rng.index(4);
            quadrant = rng.index(4);
        } else {
            // complementary partner: same layout, different answer
            quadrant = prev_quadrant;
            answer = (prev_answer + 1 + rng.index(3)) % 4;
        }
        prev_quadrant = quadrant;
        prev_answer = answer;

        const std::size_t qr = (quadrant / 2) * half;
        const std::size_t qc = (quadrant % 2) * half;
        const std::size_t r0 = qr + rng.index(half - 1);
        const std::size_t c0 = qc + rng.index(half - 1);

        Tensor feat({cfg.channels, g, g});
        for (std::size_t dr = 0; dr < 2; ++dr)
            for (std::size_t dc = 0; dc < 2; ++dc) feat.at(answer, r0 + dr, c0 + dc) = 3.0;
        for (std::size_t r = 0; r < half; ++r)
            for (std::size_t c = 0; c < half; ++c) feat.at(4 + quadrant, qr + r, qc + c) = 1.0;
        for (std::size_t ch = 8; ch < cfg.channels; ++ch)
            for (std::size_t p = 0; p < g * g; ++p)
                feat.data()[ch * g * g + p] = rng.uniform(0.0, 0.1);

        Tensor block({g, g});
        for (std::size_t dr = 0; dr < 2; ++dr)
            for (std::size_t dc = 0; dc < 2; ++dc) block.at(r0 + dr, c0 + dc) = 1.0;
        Tensor halo({g, g});
        for (std::size_t r = (r0 == 0 ? 0 : r0 - 1); r <= std::min(r0 + 2, g - 1); ++r)
            for (std::size_t c = (c0 == 0 ? 0 : c0 - 1); c <= std::min(c0 + 2, g - 1); ++c)
                halo.at(r, c) = 1.0;
        Tensor quad({g, g});
        for (std::size_t r = 0; r < half; ++r)
            for (std::size_t c = 0; c < half; ++c) quad.at(qr + r, qc + c) = 1.0;

        std::ostringstream idos;
        idos << "i" << std::setw(4) << std::setfill('0') << i;
        ExplanationRecord rec;
        rec.id = idos.str();
        rec.image_id = "img" + rec.id.substr(1);
        rec.split = "train";
        if (cfg.mode == "vqa") rec.question = "which color is the marker";
        rec.answer = synth_colors()[answer];
        rec.explanations = {"the " + synth_colors()[answer] + " marker sits in the " +
                            synth_quadrants()[quadrant] + " corner"};
        if (cfg.count % 2 == 0 || i + 1 < cfg.count) {
            std::ostringstream pos;
            pos << "p" << std::setw(4) << std::setfill('0') << (i / 2);
            rec.complementary_pair_id = pos.str();
        }
        for (int k = 0; k < 3; ++k)
            rec.mask_paths.push_back("masks/" + rec.id + "_" + std::to_string(k) + ".pjxt");

        data.masks[rec.id] = {block, halo, quad};
        data.features[rec.image_id] = std::move(feat);
        data.records.push_back(std::move(rec));
    }
    return data;
}

inline void write_synth_dataset(const std::filesystem::path& dir, const SynthData& data) {
    std::filesystem::create_directories(dir / "features");
    std::filesystem::create_directories(dir / "masks");
    for (const auto& [image_id, feat] : data.features)
        save_pjxt(dir / "features" / (image_id + ".pjxt"), feat);
    for (const auto& [id, masks] : data.masks)
        for (std::size_t k = 0; k < masks.size(); ++k)
            save_pjxt(dir / "masks" / (id + "_" + std::to_string(k) + ".pjxt"), masks[k]);
    save_records(dir / "records.jsonl", data.records);
}

}  // namespace pjx
