// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "aacap/model.hpp"
#include "aacap/text.hpp"

namespace aacap {

struct DecodeConfig {
  std::size_t beam_size = 4;
  // Maximum number of generated tokens, EOS included.
  std::size_t max_len = 30;
  // Hypotheses are ranked by log_prob / length^length_penalty; 1 is the mean
  // per-token log-probability.
  double length_penalty = 1.0;

  void validate() const;
};

struct BeamHypothesis {
  TokenIds ids;  // generated tokens, BOS excluded
  double log_prob = 0.0;
  bool finished = false;
};

double normalized_score(const BeamHypothesis& h, double length_penalty);

// Next-token log-probabilities given the generated prefix (BOS excluded).
class TokenScorer {
 public:
  virtual ~TokenScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual Eigen::VectorXd log_probs(std::span<const TokenId> prefix) const = 0;
};

class ModelScorer final : public TokenScorer {
 public:
  ModelScorer(const MultilingualModel& model, const Matrix& audio, LanguageId lang);

  std::size_t vocab_size() const override;
  Eigen::VectorXd log_probs(std::span<const TokenId> prefix) const override;
  std::size_t max_prefix() const { return model_.config().max_len - 1; }

 private:
  const MultilingualModel& model_;
  Matrix memory_;
  LanguageId lang_;
};

// Per-id flags. `never` ids are never emitted (PAD, BOS). `repeatable` ids are
// exempt from the no-repeat rule (stopwords and the remaining specials).
struct DecodeConstraints {
  TokenId eos = Vocabulary::kEos;
  std::vector<bool> never;
  std::vector<bool> repeatable;

  static DecodeConstraints for_vocabulary(const Vocabulary& vocab, const StopwordList* stopwords);
};

struct DecodeResult {
  BeamHypothesis best;
  // Every finished hypothesis, best first.
  std::vector<BeamHypothesis> finished;
  double normalized_score = 0.0;
};

// Beam search that scores any token already present in a hypothesis as -inf
// unless it is repeatable. A hypothesis reaching max_len - 1 tokens may only
// be extended with EOS. Candidates are ranked by cumulative log-probability,
// ties broken by the lexicographically smaller id sequence.
DecodeResult beam_search(const TokenScorer& scorer, const DecodeConstraints& constraints, const DecodeConfig& cfg);

struct Caption {
  Tokens tokens;
  double log_prob = 0.0;
  double normalized_score = 0.0;
};

Caption caption_audio(const MultilingualModel& model, const Matrix& audio, LanguageId lang, const Vocabulary& vocab,
                      const StopwordList& stopwords, const DecodeConfig& cfg);

}  // namespace aacap
