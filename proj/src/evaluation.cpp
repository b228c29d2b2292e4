// SPDX-License-Identifier: Apache-2.0

#include "aacap/evaluation.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <unordered_map>

#include <httplib.h>
#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap {

namespace {

using NGramCounts = std::unordered_map<std::string, double>;

// counts[n - 1] holds the n-grams of order n; keys are space-joined tokens.
std::array<NGramCounts, kCiderMaxN> count_ngrams(const Tokens& tokens) {
  std::array<NGramCounts, kCiderMaxN> counts;
  for (int n = 1; n <= kCiderMaxN; ++n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      std::string key = tokens[i];
      for (int k = 1; k < n; ++k) key += ' ' + tokens[i + k];
      counts[n - 1][key] += 1.0;
    }
  }
  return counts;
}

struct WeightedProfile {
  std::array<NGramCounts, kCiderMaxN> weights;
  std::array<double, kCiderMaxN> norms{};
  double length = 0.0;
};

WeightedProfile weigh(const std::array<NGramCounts, kCiderMaxN>& counts, std::size_t length,
                      const std::unordered_map<std::string, double>& df, double log_n) {
  WeightedProfile p;
  p.length = static_cast<double>(length);
  for (int n = 0; n < kCiderMaxN; ++n) {
    double sq = 0.0;
    for (const auto& [gram, tf] : counts[n]) {
      const auto it = df.find(gram);
      const double d = it == df.end() ? 0.0 : it->second;
      const double w = tf * (log_n - std::log(std::max(1.0, d)));
      p.weights[n][gram] = w;
      sq += w * w;
    }
    p.norms[n] = std::sqrt(sq);
  }
  return p;
}

double similarity(const WeightedProfile& cand, const WeightedProfile& ref) {
  const double delta = cand.length - ref.length;
  const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
  double total = 0.0;
  for (int n = 0; n < kCiderMaxN; ++n) {
    if (cand.norms[n] == 0.0 || ref.norms[n] == 0.0) continue;
    double dot = 0.0;
    for (const auto& [gram, w] : cand.weights[n]) {
      const auto it = ref.weights[n].find(gram);
      if (it == ref.weights[n].end()) continue;
      dot += std::min(w, it->second) * it->second;
    }
    total += dot / (cand.norms[n] * ref.norms[n]) * penalty;
  }
  return total;
}

}  // namespace

CiderResult cider_d(const CaptionMap& candidates, const ReferenceMap& references) {
  if (candidates.empty()) throw Error(ErrorKind::kInvalidArgument, "CIDEr-D: empty corpus");
  std::vector<std::string> missing;
  for (const auto& [id, cand] : candidates) {
    const auto it = references.find(id);
    if (it == references.end() || it->second.empty()) missing.push_back(id);
  }
  if (!missing.empty()) throw Error(ErrorKind::kMissingData, "CIDEr-D: candidates without references", missing);
  if (candidates.size() < 2) throw Error(ErrorKind::kInvalidArgument, "CIDEr-D needs at least two items");

  struct Item {
    std::array<NGramCounts, kCiderMaxN> cand;
    std::size_t cand_len = 0;
    std::vector<std::array<NGramCounts, kCiderMaxN>> refs;
    std::vector<std::size_t> ref_lens;
  };
  std::map<std::string, Item> items;
  std::unordered_map<std::string, double> df;
  for (const auto& [id, cand] : candidates) {
    Item item;
    const Tokens ct = tokenize(cand);
    item.cand = count_ngrams(ct);
    item.cand_len = ct.size();
    std::unordered_map<std::string, bool> seen;
    for (const auto& ref : references.at(id)) {
      const Tokens rt = tokenize(ref);
      item.refs.push_back(count_ngrams(rt));
      item.ref_lens.push_back(rt.size());
      for (const auto& order : item.refs.back()) {
        for (const auto& [gram, c] : order) seen[gram] = true;
      }
    }
    for (const auto& [gram, b] : seen) df[gram] += 1.0;
    items.emplace(id, std::move(item));
  }

  const double log_n = std::log(static_cast<double>(items.size()));
  CiderResult result;
  double sum = 0.0;
  for (const auto& [id, item] : items) {
    const WeightedProfile cand = weigh(item.cand, item.cand_len, df, log_n);
    double score = 0.0;
    for (std::size_t r = 0; r < item.refs.size(); ++r) {
      score += similarity(cand, weigh(item.refs[r], item.ref_lens[r], df, log_n));
    }
    score = score / kCiderMaxN / static_cast<double>(item.refs.size()) * kCiderScale;
    result.per_item[id] = score;
    sum += score;
  }
  result.score = sum / static_cast<double>(items.size());
  return result;
}

// ---------------------------------------------------------------------------

void StubEmbedder::add(std::string text, const Eigen::VectorXd& vector) {
  const double norm = vector.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorKind::kInvalidArgument, "stub embedding for '" + text + "' has zero norm");
  }
  if (!table_.empty() && table_.begin()->second.size() != vector.size()) {
    throw Error(ErrorKind::kShapeMismatch, "stub embeddings must share one dimension");
  }
  table_[std::move(text)] = vector / norm;
}

StubEmbedder StubEmbedder::from_json(std::string_view json) {
  StubEmbedder stub;
  try {
    const auto j = nlohmann::json::parse(json);
    for (const auto& [text, values] : j.items()) {
      const auto v = values.get<std::vector<double>>();
      stub.add(text, Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("stub embedder table: ") + e.what());
  }
  return stub;
}

std::vector<Eigen::VectorXd> StubEmbedder::embed(const std::vector<std::string>& texts, LanguageId) const {
  std::vector<Eigen::VectorXd> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    const auto it = table_.find(t);
    if (it == table_.end()) throw Error(ErrorKind::kProvider, "stub embedder has no vector for '" + t + "'");
    out.push_back(it->second);
  }
  return out;
}

HttpEmbedder::HttpEmbedder(std::string endpoint, int timeout_seconds)
    : endpoint_(std::move(endpoint)), timeout_seconds_(timeout_seconds) {
  const auto scheme = endpoint_.find("://");
  if (scheme == std::string::npos) throw Error(ErrorKind::kInvalidArgument, "embedder endpoint needs a scheme");
  const auto slash = endpoint_.find('/', scheme + 3);
  host_ = endpoint_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : endpoint_.substr(slash);
}

std::vector<Eigen::VectorXd> HttpEmbedder::embed(const std::vector<std::string>& texts, LanguageId lang) const {
  httplib::Client client(host_);
  client.set_connection_timeout(timeout_seconds_, 0);
  client.set_read_timeout(timeout_seconds_, 0);
  const nlohmann::json request = {{"texts", texts}, {"language", std::string(language_code(lang))}};
  const auto res = client.Post(path_, request.dump(), "application/json");
  if (!res) {
    throw Error(ErrorKind::kProvider, "embedder request to " + endpoint_ + " failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw Error(ErrorKind::kProvider, "embedder returned HTTP " + std::to_string(res->status));
  }
  std::vector<Eigen::VectorXd> out;
  try {
    const auto j = nlohmann::json::parse(res->body);
    const auto& vectors = j.at("vectors");
    if (vectors.size() != texts.size()) {
      throw Error(ErrorKind::kProvider, "embedder returned " + std::to_string(vectors.size()) + " vectors for " +
                                            std::to_string(texts.size()) + " texts");
    }
    for (const auto& v : vectors) {
      const auto values = v.get<std::vector<double>>();
      Eigen::VectorXd vec = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
      const double norm = vec.norm();
      if (!(norm > 0.0) || !std::isfinite(norm)) throw Error(ErrorKind::kProvider, "embedder returned a zero vector");
      if (!out.empty() && out.front().size() != vec.size()) {
        throw Error(ErrorKind::kProvider, "embedder returned vectors of different sizes");
      }
      out.push_back(vec / norm);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kProvider, std::string("embedder response: ") + e.what());
  }
  return out;
}

SimilarityResult sbert_sim(const CaptionMap& candidates, const ReferenceMap& references,
                           const EmbedderProvider& provider, LanguageId lang, ReferenceAggregation aggregation) {
  if (candidates.empty()) throw Error(ErrorKind::kInvalidArgument, "similarity: empty corpus");
  SimilarityResult result;
  double sum = 0.0;
  for (const auto& [id, cand] : candidates) {
    const auto it = references.find(id);
    if (it == references.end() || it->second.empty()) {
      throw Error(ErrorKind::kMissingData, "similarity: no references for item " + id, {id});
    }
    std::vector<std::string> texts{cand};
    texts.insert(texts.end(), it->second.begin(), it->second.end());
    std::vector<Eigen::VectorXd> vecs;
    try {
      vecs = provider.embed(texts, lang);
    } catch (const Error& e) {
      throw Error(ErrorKind::kProvider, "embedder failed on item " + id + ": " + e.what(), {id});
    }
    if (vecs.size() != texts.size()) throw Error(ErrorKind::kProvider, "embedder returned wrong count on item " + id, {id});
    double agg = aggregation == ReferenceAggregation::kMax ? -std::numeric_limits<double>::infinity() : 0.0;
    for (std::size_t r = 1; r < vecs.size(); ++r) {
      const double c = vecs[0].dot(vecs[r]);
      agg = aggregation == ReferenceAggregation::kMax ? std::max(agg, c) : agg + c;
    }
    if (aggregation == ReferenceAggregation::kMean) agg /= static_cast<double>(vecs.size() - 1);
    result.per_item[id] = 100.0 * agg;
    sum += agg;
  }
  result.score = 100.0 * sum / static_cast<double>(candidates.size());
  return result;
}

std::map<LanguageId, double> cross_language_similarity(const std::map<LanguageId, CaptionMap>& outputs,
                                                       LanguageId base, const EmbedderProvider& provider) {
  const auto base_it = outputs.find(base);
  if (base_it == outputs.end()) {
    throw Error(ErrorKind::kMissingData, "no outputs for base language '" + std::string(language_code(base)) + "'");
  }
  const CaptionMap& base_caps = base_it->second;
  if (base_caps.empty()) throw Error(ErrorKind::kInvalidArgument, "base language has no captions");
  for (const auto& [lang, caps] : outputs) {
    std::vector<std::string> diff;
    for (const auto& [id, c] : caps) {
      if (!base_caps.contains(id)) diff.push_back(id);
    }
    for (const auto& [id, c] : base_caps) {
      if (!caps.contains(id)) diff.push_back(id);
    }
    if (!diff.empty()) {
      throw Error(ErrorKind::kValidation,
                  "audio ids of '" + std::string(language_code(lang)) + "' differ from the base language", diff);
    }
  }

  std::vector<std::string> ids, base_texts;
  for (const auto& [id, c] : base_caps) {
    ids.push_back(id);
    base_texts.push_back(c);
  }
  const auto base_vecs = provider.embed(base_texts, base);
  std::map<LanguageId, double> out;
  for (const auto& [lang, caps] : outputs) {
    std::vector<std::string> texts;
    for (const auto& id : ids) texts.push_back(caps.at(id));
    const auto vecs = lang == base ? base_vecs : provider.embed(texts, lang);
    double sum = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) sum += base_vecs[i].dot(vecs[i]);
    out[lang] = 100.0 * sum / static_cast<double>(ids.size());
  }
  return out;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json langs = nlohmann::ordered_json::array();
  for (const auto& l : languages) {
    nlohmann::ordered_json e;
    e["language"] = language_code(l.language);
    e["n_items"] = l.n_items;
    e["cider_d"] = l.cider_d ? nlohmann::ordered_json(*l.cider_d) : nullptr;
    e["cider_d_raw"] = l.cider_d_raw ? nlohmann::ordered_json(*l.cider_d_raw) : nullptr;
    e["sbert_sim"] = l.sbert_sim ? nlohmann::ordered_json(*l.sbert_sim) : nullptr;
    langs.push_back(std::move(e));
  }
  j["languages"] = std::move(langs);
  j["config"] = nlohmann::ordered_json::parse(config_json);
  return j.dump(2);
}

}  // namespace aacap
