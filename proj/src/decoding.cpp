// SPDX-License-Identifier: Apache-2.0

#include "aacap/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aacap/error.hpp"

namespace aacap {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw Error(ErrorKind::kInvalidArgument, "beam_size must be >= 1");
  if (max_len < 1) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 1");
}

double normalized_score(const BeamHypothesis& h, double length_penalty) {
  if (h.ids.empty()) return h.log_prob;
  return h.log_prob / std::pow(static_cast<double>(h.ids.size()), length_penalty);
}

ModelScorer::ModelScorer(const MultilingualModel& model, const Matrix& audio, LanguageId lang)
    : model_(model), memory_(model.encode_audio(audio)), lang_(lang) {
  (void)model_.head(lang_);
}

std::size_t ModelScorer::vocab_size() const { return model_.head(lang_).vocab_size(); }

Eigen::VectorXd ModelScorer::log_probs(std::span<const TokenId> prefix) const {
  TokenIds input;
  input.reserve(prefix.size() + 1);
  input.push_back(Vocabulary::kBos);
  input.insert(input.end(), prefix.begin(), prefix.end());
  const Matrix logits = model_.decode_logits(memory_, input, lang_);
  return nn::log_softmax_rows(logits.bottomRows(1)).row(0).transpose();
}

DecodeConstraints DecodeConstraints::for_vocabulary(const Vocabulary& vocab, const StopwordList* stopwords) {
  DecodeConstraints c;
  c.eos = Vocabulary::kEos;
  c.never.assign(vocab.size(), false);
  c.repeatable.assign(vocab.size(), false);
  c.never[Vocabulary::kPad] = true;
  c.never[Vocabulary::kBos] = true;
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    const auto tid = static_cast<TokenId>(id);
    if (vocab.is_special(tid) || (stopwords && stopwords->contains(vocab.token(tid)))) c.repeatable[id] = true;
  }
  return c;
}

namespace {

bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.ids < b.ids;
}

}  // namespace

DecodeResult beam_search(const TokenScorer& scorer, const DecodeConstraints& constraints, const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t vocab = scorer.vocab_size();
  if (constraints.never.size() != vocab || constraints.repeatable.size() != vocab) {
    throw Error(ErrorKind::kShapeMismatch, "decode constraints do not match the vocabulary size");
  }
  const auto eos = static_cast<std::size_t>(constraints.eos);

  std::vector<BeamHypothesis> alive{BeamHypothesis{}};
  std::vector<BeamHypothesis> finished;
  for (std::size_t step = 0; step < cfg.max_len && !alive.empty(); ++step) {
    const bool last_step = step + 1 == cfg.max_len;
    std::vector<BeamHypothesis> candidates;
    for (const auto& h : alive) {
      const Eigen::VectorXd lp = scorer.log_probs(h.ids);
      for (std::size_t v = 0; v < vocab; ++v) {
        if (constraints.never[v] || !std::isfinite(lp(static_cast<Eigen::Index>(v)))) continue;
        if (last_step && v != eos) continue;
        const auto id = static_cast<TokenId>(v);
        if (!constraints.repeatable[v] && std::find(h.ids.begin(), h.ids.end(), id) != h.ids.end()) continue;
        BeamHypothesis next{h.ids, h.log_prob + lp(static_cast<Eigen::Index>(v)), v == eos};
        next.ids.push_back(id);
        candidates.push_back(std::move(next));
      }
    }
    const std::size_t keep = std::min(cfg.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    alive.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      (candidates[i].finished ? finished : alive).push_back(std::move(candidates[i]));
    }
  }
  // Only reachable when EOS itself scored -inf: close the survivors by force.
  if (finished.empty()) {
    for (auto& h : alive) {
      h.ids.push_back(constraints.eos);
      h.finished = true;
      finished.push_back(std::move(h));
    }
    if (finished.empty()) finished.push_back(BeamHypothesis{{constraints.eos}, 0.0, true});
  }

  std::stable_sort(finished.begin(), finished.end(), [&](const BeamHypothesis& a, const BeamHypothesis& b) {
    const double sa = normalized_score(a, cfg.length_penalty), sb = normalized_score(b, cfg.length_penalty);
    if (sa != sb) return sa > sb;
    return a.ids < b.ids;
  });
  DecodeResult result;
  result.best = finished.front();
  result.normalized_score = normalized_score(result.best, cfg.length_penalty);
  result.finished = std::move(finished);
  return result;
}

Caption caption_audio(const MultilingualModel& model, const Matrix& audio, LanguageId lang, const Vocabulary& vocab,
                      const StopwordList& stopwords, const DecodeConfig& cfg) {
  if (vocab.size() != model.head(lang).vocab_size()) {
    throw Error(ErrorKind::kShapeMismatch, "vocabulary does not match the model head");
  }
  const ModelScorer scorer(model, audio, lang);
  DecodeConfig bounded = cfg;
  bounded.max_len = std::min(cfg.max_len, static_cast<std::size_t>(model.config().max_len));
  const DecodeResult r = beam_search(scorer, DecodeConstraints::for_vocabulary(vocab, &stopwords), bounded);
  return {vocab.decode(r.best.ids), r.best.log_prob, r.normalized_score};
}

}  // namespace aacap
