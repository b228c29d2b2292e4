// SPDX-License-Identifier: Apache-2.0
// Reference implementations and fixtures shared by the unit tests and the
// acceptance runner. Nothing here calls into the code it is used to check.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aacap/decoding.hpp"
#include "aacap/evaluation.hpp"
#include "aacap/model.hpp"
#include "aacap/training.hpp"

namespace aacap::testing {

// Brute-force CIDEr-D over whitespace-split captions.
double cider_oracle(const CaptionMap& candidates, const ReferenceMap& references,
                    std::map<std::string, double>* per_item = nullptr);

// Random corpus of `items` entries drawn from a small alphabet so n-grams
// overlap often.
struct CiderCorpus {
  CaptionMap candidates;
  ReferenceMap references;
};
CiderCorpus random_cider_corpus(Rng& rng, std::size_t items, std::size_t max_tokens = 12, std::size_t alphabet = 6);

// Analytic vs central-difference gradients of the smoothed, mixed loss on a
// tiny model. Errors are ||analytic - numeric|| / (||analytic|| + ||numeric||)
// per tensor; `groups` keeps the worst tensor of each parameter family.
struct GradCheckReport {
  std::map<std::string, double> groups;
  double worst = 0.0;
  std::size_t n_checked = 0;
};
GradCheckReport gradient_check(std::uint64_t seed, bool train_mode);

// Scorer whose next-token distribution is a fixed function of the prefix.
class TableScorer final : public TokenScorer {
 public:
  // Context-free distribution.
  explicit TableScorer(Eigen::VectorXd log_probs) : base_(std::move(log_probs)) {}
  // Deterministic pseudo-random distribution per prefix.
  TableScorer(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
  std::size_t vocab_size() const override { return base_.size() ? static_cast<std::size_t>(base_.size()) : vocab_; }
  Eigen::VectorXd log_probs(std::span<const TokenId> prefix) const override;

 private:
  Eigen::VectorXd base_;
  std::size_t vocab_ = 0;
  std::uint64_t seed_ = 0;
};

// Best sequence under the decoding constraints by full enumeration.
BeamHypothesis exhaustive_decode(const TokenScorer& scorer, const DecodeConstraints& constraints,
                                 std::size_t max_len, double length_penalty);

// True when no non-repeatable id occurs twice.
bool respects_no_repeat(const TokenIds& ids, const DecodeConstraints& constraints);

// Synthetic multilingual corpus: each audio is a distinct random embedding,
// each caption a distinct short sentence from a per-language word list with
// no repeated words.
struct SyntheticCorpus {
  TrainingCorpus items;
  std::map<LanguageId, Vocabulary> vocabularies;
};
SyntheticCorpus synthetic_corpus(std::size_t n_audio, std::span<const LanguageId> languages, std::uint32_t d_in,
                                 std::uint32_t frames, std::size_t words_per_language, std::uint64_t seed);

}  // namespace aacap::testing
