// Textual-justification scoring: BLEU-4, ROUGE-L, and CIDEr over
// multi-reference corpora, plus the external-metric hook.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pjx/common.hpp"
#include "pjx/dataset.hpp"
#include "pjx/report.hpp"

namespace pjx {

// Published full-scale results for this architecture (percent scale), for
// orientation only.
namespace reference_scores {
inline constexpr double kTextBleu4Vqa = 19.8;
inline constexpr double kTextMeteorVqa = 18.6;
inline constexpr double kTextRougeVqa = 44.0;
inline constexpr double kTextCiderVqa = 73.4;
inline constexpr double kTextSpiceVqa = 15.4;
}  // namespace reference_scores

struct CorpusInstance {
    std::string id;
    std::vector<std::string> candidate;
    std::vector<std::vector<std::string>> references;  // >= 1
};

using Corpus = std::vector<CorpusInstance>;

inline void validate_corpus(const Corpus& corpus) {
    if (corpus.empty()) throw ContractError("text metrics: empty corpus");
    for (const auto& inst : corpus)
        if (inst.references.empty())
            throw ContractError("text metrics: instance " + inst.id + " has no references");
}

// Corpus file: JSON lines {id, candidate, references:[...]}. Sentences run
// through the shared tokenizer.
inline Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file " + path.string());
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw ValidationError("corpus line " + std::to_string(line_no) + ": malformed JSON");
        CorpusInstance inst;
        inst.id = j.at("id").get<std::string>();
        inst.candidate = tokenize(j.at("candidate").get<std::string>());
        for (const auto& r : j.at("references"))
            inst.references.push_back(tokenize(r.get<std::string>()));
        if (inst.references.empty())
            throw ValidationError("corpus line " + std::to_string(line_no) + ": no references");
        corpus.push_back(std::move(inst));
    }
    return corpus;
}

namespace detail {

using NgramCounts = std::map<std::string, std::size_t>;

inline std::string ngram_key(const std::vector<std::string>& tokens, std::size_t start,
                             std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += tokens[start + i];
    }
    return key;
}

inline NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NgramCounts counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[ngram_key(tokens, i, n)];
    return counts;
}

inline std::size_t lcs_length(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

// Corpus-level BLEU-4: geometric mean of clipped n-gram precisions n=1..4
// with a brevity penalty against the closest reference length. Orders >= 2
// get +1 smoothing by default; small corpora collapse to 0 otherwise.
inline double bleu4(const Corpus& corpus, bool smoothing = true) {
    validate_corpus(corpus);
    constexpr std::size_t kMaxOrder = 4;
    std::array<double, kMaxOrder> matches{}, totals{};
    std::size_t cand_len = 0, ref_len = 0;
    for (const auto& inst : corpus) {
        cand_len += inst.candidate.size();
        std::size_t closest = inst.references.front().size();
        for (const auto& ref : inst.references) {
            const auto diff = [&](std::size_t len) {
                return len > inst.candidate.size() ? len - inst.candidate.size()
                                                   : inst.candidate.size() - len;
            };
            if (diff(ref.size()) < diff(closest) ||
                (diff(ref.size()) == diff(closest) && ref.size() < closest))
                closest = ref.size();
        }
        ref_len += closest;
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            const auto cand = detail::count_ngrams(inst.candidate, n);
            detail::NgramCounts max_ref;
            for (const auto& ref : inst.references)
                for (const auto& [key, count] : detail::count_ngrams(ref, n))
                    max_ref[key] = std::max(max_ref[key], count);
            for (const auto& [key, count] : cand) {
                totals[n - 1] += static_cast<double>(count);
                auto it = max_ref.find(key);
                if (it != max_ref.end())
                    matches[n - 1] += static_cast<double>(std::min(count, it->second));
            }
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
        const double smooth = smoothing && n >= 2 ? 1.0 : 0.0;
        const double p = (matches[n - 1] + smooth) / (totals[n - 1] + smooth);
        if (p <= 0.0) return 0.0;
        log_sum += std::log(p);
    }
    const double bp =
        cand_len >= ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
    return bp * std::exp(log_sum / static_cast<double>(kMaxOrder));
}

inline constexpr double kRougeBeta = 1.2;

inline double rouge_l_instance(const CorpusInstance& inst, double beta = kRougeBeta) {
    double best = 0.0;
    for (const auto& ref : inst.references) {
        if (inst.candidate.empty() || ref.empty()) continue;
        const double lcs = static_cast<double>(detail::lcs_length(inst.candidate, ref));
        if (lcs == 0.0) continue;
        const double precision = lcs / static_cast<double>(inst.candidate.size());
        const double recall = lcs / static_cast<double>(ref.size());
        const double b2 = beta * beta;
        best = std::max(best, (1.0 + b2) * recall * precision / (recall + b2 * precision));
    }
    return best;
}

// Mean over instances of the max-over-references LCS F-measure.
inline double rouge_l(const Corpus& corpus, double beta = kRougeBeta) {
    validate_corpus(corpus);
    double sum = 0.0;
    for (const auto& inst : corpus) sum += rouge_l_instance(inst, beta);
    return sum / static_cast<double>(corpus.size());
}

inline constexpr double kCiderSigma = 6.0;

namespace detail {

struct CiderVec {
    std::map<std::string, double> weights;  // tf * idf per n-gram
    double norm = 0.0;
};

inline CiderVec cider_vec(const std::vector<std::string>& tokens, std::size_t n,
                          const std::map<std::string, std::size_t>& df, double log_instances) {
    CiderVec v;
    for (const auto& [key, count] : count_ngrams(tokens, n)) {
        auto it = df.find(key);
        const double doc_freq = it == df.end() ? 0.0 : static_cast<double>(it->second);
        const double idf = log_instances - std::log(std::max(1.0, doc_freq));
        const double w = static_cast<double>(count) * idf;
        v.weights[key] = w;
        v.norm += w * w;
    }
    v.norm = std::sqrt(v.norm);
    return v;
}

}  // namespace detail

// CIDEr with count clipping and the Gaussian length penalty: per n-gram order
// 1..4, TF-IDF vectors (IDF over the reference corpus, document = instance)
// are compared by clipped cosine similarity, averaged over orders and
// references and scaled by 10.
inline std::vector<double> cider_per_instance(const Corpus& corpus, double sigma = kCiderSigma) {
    validate_corpus(corpus);
    if (corpus.size() < 2)
        throw ContractError("cider: needs at least 2 instances for a meaningful IDF");
    constexpr std::size_t kMaxOrder = 4;
    const double log_instances = std::log(static_cast<double>(corpus.size()));

    std::array<std::map<std::string, std::size_t>, kMaxOrder> df;
    for (const auto& inst : corpus) {
        for (std::size_t n = 1; n <= kMaxOrder; ++n) {
            detail::NgramCounts seen;
            for (const auto& ref : inst.references)
                for (const auto& [key, count] : detail::count_ngrams(ref, n)) seen[key] = 1;
            for (const auto& [key, one] : seen) ++df[n - 1][key];
        }
    }

    std::vector<double> scores;
    scores.reserve(corpus.size());
    for (const auto& inst : corpus) {
        double ref_sum = 0.0;
        for (const auto& ref : inst.references) {
            const double delta =
                static_cast<double>(inst.candidate.size()) - static_cast<double>(ref.size());
            const double penalty = std::exp(-delta * delta / (2.0 * sigma * sigma));
            double order_sum = 0.0;
            for (std::size_t n = 1; n <= kMaxOrder; ++n) {
                const detail::CiderVec cv =
                    detail::cider_vec(inst.candidate, n, df[n - 1], log_instances);
                const detail::CiderVec rv = detail::cider_vec(ref, n, df[n - 1], log_instances);
                if (cv.norm == 0.0 || rv.norm == 0.0) continue;
                double dot = 0.0;
                for (const auto& [key, cw] : cv.weights) {
                    auto it = rv.weights.find(key);
                    if (it != rv.weights.end()) dot += std::min(cw, it->second) * it->second;
                }
                order_sum += dot / (cv.norm * rv.norm) * penalty;
            }
            ref_sum += order_sum / static_cast<double>(kMaxOrder);
        }
        scores.push_back(10.0 * ref_sum / static_cast<double>(inst.references.size()));
    }
    return scores;
}

inline double cider(const Corpus& corpus, double sigma = kCiderSigma) {
    const std::vector<double> scores = cider_per_instance(corpus, sigma);
    double sum = 0.0;
    for (double s : scores) sum += s;
    return sum / static_cast<double>(scores.size());
}

// Hook for metrics that need external resources: given the corpus, return a
// score or nothing. Declared-but-absent metrics appear in the report as
// unavailable placeholders.
struct ExternalMetric {
    std::string name;
    std::function<std::optional<double>(const Corpus&)> fn;
};

struct TextScoreOptions {
    bool bleu_smoothing = true;
    double rouge_beta = kRougeBeta;
    double cider_sigma = kCiderSigma;
};

inline std::vector<MetricReport> score_text(const Corpus& corpus,
                                            const TextScoreOptions& opts = {},
                                            const std::vector<ExternalMetric>& external = {}) {
    validate_corpus(corpus);
    std::vector<MetricReport> reports;

    MetricReport bleu;
    bleu.metric = "BLEU4";
    bleu.n = corpus.size();
    bleu.mean = bleu4(corpus, opts.bleu_smoothing);
    reports.push_back(std::move(bleu));

    std::vector<std::pair<std::string, double>> rouge_values;
    for (const auto& inst : corpus)
        rouge_values.emplace_back(inst.id, rouge_l_instance(inst, opts.rouge_beta));
    reports.push_back(summarize("ROUGEL", std::move(rouge_values)));

    if (corpus.size() >= 2) {
        const std::vector<double> cider_values = cider_per_instance(corpus, opts.cider_sigma);
        std::vector<std::pair<std::string, double>> values;
        for (std::size_t i = 0; i < corpus.size(); ++i)
            values.emplace_back(corpus[i].id, cider_values[i]);
        reports.push_back(summarize("CIDEr", std::move(values)));
    } else {
        MetricReport c;
        c.metric = "CIDEr";
        c.available = false;
        reports.push_back(std::move(c));
    }

    for (const char* name : {"METEOR", "SPICE"}) {
        MetricReport r;
        r.metric = name;
        r.available = false;
        for (const auto& ext : external) {
            if (ext.name != name) continue;
            if (const auto score = ext.fn(corpus)) {
                r.available = true;
                r.n = corpus.size();
                r.mean = *score;
            }
        }
        reports.push_back(std::move(r));
    }
    return reports;
}

}  // namespace pjx
