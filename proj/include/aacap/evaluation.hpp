// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "aacap/text.hpp"

namespace aacap {

using CaptionMap = std::map<std::string, std::string>;                 // audio_id -> caption
using ReferenceMap = std::map<std::string, std::vector<std::string>>;  // audio_id -> references

// ---------------------------------------------------------------------------
// CIDEr-D
//
// n-grams of order 1..4 are weighted by term frequency times
// log(N / max(1, df)), where df counts the items whose reference set contains
// the n-gram and N is the number of evaluated items. Candidate weights are
// clipped to the reference weights, each order contributes a cosine
// similarity damped by exp(-(l_cand - l_ref)^2 / (2 sigma^2)), orders are
// averaged, references are averaged, and the result is scaled by 10.

inline constexpr int kCiderMaxN = 4;
inline constexpr double kCiderSigma = 6.0;
inline constexpr double kCiderScale = 10.0;

struct CiderResult {
  double score = 0.0;  // corpus mean, in [0, 10]
  std::map<std::string, double> per_item;
};

CiderResult cider_d(const CaptionMap& candidates, const ReferenceMap& references);

// ---------------------------------------------------------------------------
// Sentence-embedding similarity

class EmbedderProvider {
 public:
  virtual ~EmbedderProvider() = default;
  virtual std::string name() const = 0;
  // One unit-norm vector per text.
  virtual std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts, LanguageId lang) const = 0;
};

// Table-driven provider for tests and offline runs. Vectors are normalised on
// insertion; unknown texts fail with kProvider.
class StubEmbedder final : public EmbedderProvider {
 public:
  void add(std::string text, const Eigen::VectorXd& vector);
  // JSON object {"text": [floats], ...}.
  static StubEmbedder from_json(std::string_view json);

  std::string name() const override { return "stub"; }
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts, LanguageId lang) const override;

 private:
  std::map<std::string, Eigen::VectorXd> table_;
};

// Client for an embedding service: POST <endpoint> with
//   {"texts": [...], "language": "fr"}  ->  {"vectors": [[...], ...]}
class HttpEmbedder final : public EmbedderProvider {
 public:
  // `endpoint` like "http://127.0.0.1:8080/embed".
  explicit HttpEmbedder(std::string endpoint, int timeout_seconds = 60);

  std::string name() const override { return "http:" + endpoint_; }
  std::vector<Eigen::VectorXd> embed(const std::vector<std::string>& texts, LanguageId lang) const override;

 private:
  std::string endpoint_;
  std::string host_;  // scheme://host:port
  std::string path_;
  int timeout_seconds_;
};

enum class ReferenceAggregation { kMean, kMax };

struct SimilarityResult {
  double score = 0.0;  // percentage
  std::map<std::string, double> per_item;
};

// Cosine between candidate and reference embeddings, aggregated over the
// references of each item, averaged over items, times 100.
SimilarityResult sbert_sim(const CaptionMap& candidates, const ReferenceMap& references,
                           const EmbedderProvider& provider, LanguageId lang,
                           ReferenceAggregation aggregation = ReferenceAggregation::kMean);

// For each language: mean cosine (x100) between its caption and the base
// language caption of the same audio. The base maps to itself.
std::map<LanguageId, double> cross_language_similarity(const std::map<LanguageId, CaptionMap>& outputs,
                                                       LanguageId base, const EmbedderProvider& provider);

// ---------------------------------------------------------------------------

struct LanguageEval {
  LanguageId language = LanguageId::kEn;
  std::size_t n_items = 0;
  std::optional<double> cider_d;      // percentage
  std::optional<double> cider_d_raw;  // [0, 10]
  std::optional<double> sbert_sim;    // percentage
};

struct EvalReport {
  std::vector<LanguageEval> languages;
  std::string config_json = "{}";

  std::string to_json() const;
};

}  // namespace aacap
