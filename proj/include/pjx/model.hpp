// Model configuration, named parameter collections, and checkpoints.
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pjx/common.hpp"
#include "pjx/graph.hpp"
#include "pjx/tensor.hpp"

namespace pjx {

struct ModelConfig {
    std::string mode = "vqa";  // "vqa" | "act"

    std::size_t feature_channels = 2048;  // C
    std::size_t grid_n = 14;
    std::size_t grid_m = 14;

    std::size_t question_vocab = 0;  // filled in from the built vocabulary
    std::size_t question_embed = 300;
    std::size_t question_hidden = 512;  // per layer of the 2-layer encoder

    std::size_t pool_dim = 512;     // fused image-question dimension
    std::size_t attn_hidden = 512;  // hidden channels of both attention heads

    std::size_t answer_count = 3000;  // |Y|
    std::size_t answer_embed = 300;   // d

    std::size_t expl_vocab = 0;
    std::size_t expl_embed = 300;
    std::size_t decoder_hidden = 512;

    double dropout_rate = 0.3;

    // Resolved structural choices, recorded in every checkpoint manifest.
    static constexpr int kAnswerHeadLayers = 1;
    static constexpr const char* kExplainerIqTap = "pre_dropout";

    // Small dimensions for CPU-scale tests and fixtures.
    static ModelConfig desk() {
        ModelConfig c;
        c.feature_channels = 16;
        c.question_embed = 16;
        c.question_hidden = 32;
        c.pool_dim = 32;
        c.attn_hidden = 16;
        c.answer_count = 4;
        c.answer_embed = 32;
        c.expl_embed = 24;
        c.decoder_hidden = 48;
        c.dropout_rate = 0.0;
        return c;
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"mode", c.mode},
                          {"feature_channels", c.feature_channels},
                          {"grid_n", c.grid_n},
                          {"grid_m", c.grid_m},
                          {"question_vocab", c.question_vocab},
                          {"question_embed", c.question_embed},
                          {"question_hidden", c.question_hidden},
                          {"pool_dim", c.pool_dim},
                          {"attn_hidden", c.attn_hidden},
                          {"answer_count", c.answer_count},
                          {"answer_embed", c.answer_embed},
                          {"expl_vocab", c.expl_vocab},
                          {"expl_embed", c.expl_embed},
                          {"decoder_hidden", c.decoder_hidden},
                          {"dropout_rate", c.dropout_rate},
                          {"answer_head_layers", ModelConfig::kAnswerHeadLayers},
                          {"explainer_iq_tap", ModelConfig::kExplainerIqTap}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.mode = j.at("mode").get<std::string>();
    c.feature_channels = j.at("feature_channels").get<std::size_t>();
    c.grid_n = j.at("grid_n").get<std::size_t>();
    c.grid_m = j.at("grid_m").get<std::size_t>();
    c.question_vocab = j.at("question_vocab").get<std::size_t>();
    c.question_embed = j.at("question_embed").get<std::size_t>();
    c.question_hidden = j.at("question_hidden").get<std::size_t>();
    c.pool_dim = j.at("pool_dim").get<std::size_t>();
    c.attn_hidden = j.at("attn_hidden").get<std::size_t>();
    c.answer_count = j.at("answer_count").get<std::size_t>();
    c.answer_embed = j.at("answer_embed").get<std::size_t>();
    c.expl_vocab = j.at("expl_vocab").get<std::size_t>();
    c.expl_embed = j.at("expl_embed").get<std::size_t>();
    c.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    return c;
}

// Named tensors with per-tensor freeze flags. Ordered by name so iteration
// (and therefore training) is deterministic.
class ModelParams {
public:
    struct Entry {
        Tensor value;
        bool frozen = false;
        bool operator==(const Entry& o) const {
            return frozen == o.frozen && value == o.value;
        }
    };

    void add(const std::string& name, Tensor value, bool frozen = false) {
        if (entries_.count(name))
            throw ContractError("duplicate parameter name " + name);
        entries_[name] = Entry{std::move(value), frozen};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& at(const std::string& name) { return entry(name).value; }
    const Tensor& at(const std::string& name) const { return entry(name).value; }

    bool frozen(const std::string& name) const { return entry(name).frozen; }
    void set_frozen(const std::string& name, bool f) { entry(name).frozen = f; }

    void freeze_prefix(const std::string& prefix, bool f = true) {
        for (auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) e.frozen = f;
    }

    void merge(const ModelParams& other) {
        for (const auto& [name, e] : other.entries_) add(name, e.value, e.frozen);
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

    bool operator==(const ModelParams& o) const { return entries_ == o.entries_; }

private:
    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("unknown parameter " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("unknown parameter " + name);
        return it->second;
    }

    std::map<std::string, Entry> entries_;
};

// Xavier-uniform initialization for a rank-2 weight; biases start at zero.
inline Tensor xavier(std::size_t rows, std::size_t cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    Tensor t({rows, cols});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

// Parameters materialized as labeled graph leaves, one binding per graph.
class BoundParams {
public:
    BoundParams(Graph& g, const ModelParams& p) {
        for (const auto& [name, e] : p.entries()) ids_[name] = g.leaf(e.value, name);
    }

    // Substitute existing nodes for selected parameters (gradient checking).
    BoundParams(Graph& g, const ModelParams& p, const std::map<std::string, NodeId>& overrides) {
        for (const auto& [name, e] : p.entries()) {
            auto it = overrides.find(name);
            ids_[name] = it != overrides.end() ? it->second : g.leaf(e.value, name);
        }
    }

    NodeId operator[](const std::string& name) const {
        auto it = ids_.find(name);
        if (it == ids_.end()) throw ContractError("parameter " + name + " not bound");
        return it->second;
    }

    const std::map<std::string, NodeId>& ids() const { return ids_; }

private:
    std::map<std::string, NodeId> ids_;
};

// --- checkpoints ------------------------------------------------------
//
// A checkpoint is a directory: one PJXT file per tensor plus manifest.json
// mapping name -> {file, shape, frozen} alongside the model config and the
// hash of the vocabulary the model was trained with.

struct Checkpoint {
    ModelParams params;
    ModelConfig config;
    std::string vocab_hash;
};

inline std::string tensor_file_name(const std::string& name) {
    std::string out;
    for (char c : name) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return out + ".pjxt";
}

inline void save_checkpoint(const std::filesystem::path& dir, const ModelParams& params,
                            const ModelConfig& config, const std::string& vocab_hash) {
    std::filesystem::create_directories(dir);
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, e] : params.entries()) {
        const std::string file = tensor_file_name(name);
        save_pjxt(dir / file, e.value);
        tensors[name] = {{"file", file}, {"shape", e.value.shape()}, {"frozen", e.frozen}};
    }
    nlohmann::json manifest{{"format_version", 1},
                            {"config", to_json(config)},
                            {"vocab_hash", vocab_hash},
                            {"tensors", tensors}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest in " + dir.string() + ": " + e.what());
    }
    Checkpoint ck;
    ck.config = model_config_from_json(manifest.at("config"));
    ck.vocab_hash = manifest.at("vocab_hash").get<std::string>();
    for (const auto& [name, meta] : manifest.at("tensors").items()) {
        Tensor t = load_pjxt(dir / meta.at("file").get<std::string>());
        const auto shape = meta.at("shape").get<Shape>();
        if (t.shape() != shape)
            throw IoError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) +
                          " but manifest says " + shape_str(shape));
        ck.params.add(name, std::move(t), meta.at("frozen").get<bool>());
    }
    return ck;
}

}  // namespace pjx
