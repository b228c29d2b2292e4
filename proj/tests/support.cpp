// SPDX-License-Identifier: Apache-2.0

#include "support.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <set>
#include <sstream>

namespace aacap::testing {

namespace {

using Gram = std::vector<std::string>;
using GramCounts = std::map<Gram, double>;

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

GramCounts grams(const std::vector<std::string>& w, std::size_t n) {
  GramCounts c;
  for (std::size_t i = 0; i + n <= w.size(); ++i) c[Gram(w.begin() + i, w.begin() + i + n)] += 1.0;
  return c;
}

}  // namespace

double cider_oracle(const CaptionMap& candidates, const ReferenceMap& references, std::map<std::string, double>* per_item) {
  const double n_items = static_cast<double>(candidates.size());
  std::array<std::map<Gram, double>, 4> df;
  for (const auto& [id, refs] : references) {
    if (!candidates.contains(id)) continue;
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<Gram> seen;
      for (const auto& r : refs) {
        for (const auto& [g, c] : grams(words(r), n)) seen.insert(g);
      }
      for (const auto& g : seen) df[n - 1][g] += 1.0;
    }
  }
  auto tfidf = [&](const std::vector<std::string>& w, std::size_t n) {
    GramCounts v = grams(w, n);
    for (auto& [g, x] : v) {
      const auto it = df[n - 1].find(g);
      const double d = it == df[n - 1].end() ? 1.0 : std::max(1.0, it->second);
      x *= std::log(n_items) - std::log(d);
    }
    return v;
  };
  auto norm = [](const GramCounts& v) {
    double s = 0.0;
    for (const auto& [g, x] : v) s += x * x;
    return std::sqrt(s);
  };

  double total = 0.0;
  for (const auto& [id, cand] : candidates) {
    const auto cw = words(cand);
    const auto& refs = references.at(id);
    double item = 0.0;
    for (const auto& r : refs) {
      const auto rw = words(r);
      const double delta = static_cast<double>(cw.size()) - static_cast<double>(rw.size());
      double sum_n = 0.0;
      for (std::size_t n = 1; n <= 4; ++n) {
        const GramCounts vc = tfidf(cw, n), vr = tfidf(rw, n);
        double dot = 0.0;
        for (const auto& [g, x] : vc) {
          const auto it = vr.find(g);
          if (it != vr.end()) dot += std::min(x, it->second) * it->second;
        }
        const double nc = norm(vc), nr = norm(vr);
        if (nc != 0.0 && nr != 0.0) dot /= nc * nr;
        sum_n += dot * std::exp(-delta * delta / (2.0 * 36.0));
      }
      item += sum_n / 4.0;
    }
    item = 10.0 * item / static_cast<double>(refs.size());
    if (per_item) (*per_item)[id] = item;
    total += item;
  }
  return total / n_items;
}

CiderCorpus random_cider_corpus(Rng& rng, std::size_t items, std::size_t max_tokens, std::size_t alphabet) {
  auto sentence = [&] {
    std::string s;
    for (std::size_t k = rng.between(1, max_tokens); k > 0; --k) {
      s += std::string(1, static_cast<char>('a' + rng.index(alphabet)));
      if (k > 1) s += ' ';
    }
    return s;
  };
  CiderCorpus c;
  for (std::size_t i = 0; i < items; ++i) {
    const std::string id = "item" + std::to_string(i);
    c.candidates[id] = sentence();
    auto& refs = c.references[id];
    for (std::size_t r = rng.between(1, 5); r > 0; --r) refs.push_back(sentence());
  }
  return c;
}

// ---------------------------------------------------------------------------

namespace {

std::string param_group(const std::string& name) {
  for (const char* g : {"frontend", "self_attn", "cross_attn", ".ff.", "norm", "embedding", "classifier"}) {
    if (name.find(g) != std::string::npos) {
      std::string s = g;
      s.erase(std::remove(s.begin(), s.end(), '.'), s.end());
      return s;
    }
  }
  return name;
}

}  // namespace

GradCheckReport gradient_check(std::uint64_t seed, bool train_mode) {
  ModelConfig cfg;
  cfg.d_in = 6;
  cfg.d_model = 8;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.max_len = 8;
  cfg.init_seed = seed;
  const std::size_t vocab = 11;
  const std::pair<LanguageId, std::size_t> heads[] = {{LanguageId::kFr, vocab}};
  MultilingualModel model(cfg, heads);

  Rng rng(seed + 1);
  Matrix audio(3, cfg.d_in);
  for (Eigen::Index i = 0; i < audio.size(); ++i) audio.data()[i] = rng.uniform(-1.0, 1.0);
  auto random_ids = [&](std::size_t len) {
    TokenIds ids{Vocabulary::kBos};
    while (ids.size() < len) ids.push_back(static_cast<TokenId>(rng.between(3, vocab - 1)));
    return ids;
  };
  const TokenIds in_a = random_ids(5), in_b = random_ids(5);
  TokenIds tgt_a(in_a.begin() + 1, in_a.end()), tgt_b(in_b.begin() + 1, in_b.end());
  tgt_a.push_back(Vocabulary::kEos);
  tgt_b.push_back(Vocabulary::kPad);
  const double lambda = 0.7;
  const TokenSource sources[] = {{in_a, lambda}, {in_b, 1.0 - lambda}};
  const std::vector<TokenIds> ta{tgt_a}, tb{tgt_b};
  const WeightedTargets targets[] = {{ta, lambda}, {tb, 1.0 - lambda}};
  const Mode mode = train_mode ? Mode::kTrain : Mode::kEval;

  auto loss_at = [&](bool with_grad) {
    Rng drop(seed + 2);
    ForwardCache cache;
    const Matrix logits = model.forward_cached(audio, sources, LanguageId::kFr, mode, &drop, cache);
    const std::vector<Matrix> batch{logits};
    LossAndGrad lg = mixed_smoothed_cross_entropy(batch, targets, 0.1);
    if (with_grad) model.backward(cache, lg.dlogits[0]);
    return lg.loss;
  };

  model.zero_grad();
  loss_at(true);
  GradCheckReport report;
  const double h = 1e-4;
  for (auto& np : model.parameters()) {
    nn::Param& p = *np.param;
    Matrix numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      auto at = [&](double offset) {
        p.value.data()[i] = orig + offset;
        return loss_at(false);
      };
      // Fourth-order central difference.
      numeric.data()[i] = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      p.value.data()[i] = orig;
    }
    const double denom = p.grad.norm() + numeric.norm();
    // Gradients whose norms sum below 1e-6 count as zero (key biases have an
    // identically zero gradient), so the floor keeps round-off from reading as error.
    const double err = (p.grad - numeric).norm() / std::max(denom, 1e-6);
    if (std::getenv("AACAP_GRADCHECK_VERBOSE")) std::fprintf(stderr, "%s %.3g %.3g %.3g\n", np.name.c_str(), err, p.grad.norm(), numeric.norm());
    double& g = report.groups[param_group(np.name)];
    g = std::max(g, err);
    report.worst = std::max(report.worst, err);
    report.n_checked += static_cast<std::size_t>(p.value.size());
  }
  return report;
}

// ---------------------------------------------------------------------------

Eigen::VectorXd TableScorer::log_probs(std::span<const TokenId> prefix) const {
  if (base_.size()) return base_;
  std::uint64_t h = seed_;
  for (TokenId t : prefix) h = h * 1'000'003 + static_cast<std::uint64_t>(t) + 1;
  Rng rng(h);
  Eigen::VectorXd logits(static_cast<Eigen::Index>(vocab_));
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = 3.0 * rng.normal();
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

namespace {

void enumerate(const TokenScorer& scorer, const DecodeConstraints& c, std::size_t max_len, double penalty,
               TokenIds& prefix, double lp, BeamHypothesis& best, double& best_score, bool& have) {
  const Eigen::VectorXd next = scorer.log_probs(prefix);
  for (std::size_t v = 0; v < scorer.vocab_size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    if (c.never[v] || !std::isfinite(next(static_cast<Eigen::Index>(v)))) continue;
    if (!c.repeatable[v] && std::count(prefix.begin(), prefix.end(), id) > 0) continue;
    const bool is_eos = id == c.eos;
    if (!is_eos && prefix.size() + 1 >= max_len) continue;
    prefix.push_back(id);
    const double total = lp + next(static_cast<Eigen::Index>(v));
    if (is_eos) {
      const double score = total / std::pow(static_cast<double>(prefix.size()), penalty);
      if (!have || score > best_score || (score == best_score && prefix < best.ids)) {
        best = {prefix, total, true};
        best_score = score;
        have = true;
      }
    } else {
      enumerate(scorer, c, max_len, penalty, prefix, total, best, best_score, have);
    }
    prefix.pop_back();
  }
}

}  // namespace

BeamHypothesis exhaustive_decode(const TokenScorer& scorer, const DecodeConstraints& constraints,
                                 std::size_t max_len, double length_penalty) {
  TokenIds prefix;
  BeamHypothesis best;
  double best_score = 0.0;
  bool have = false;
  enumerate(scorer, constraints, max_len, length_penalty, prefix, 0.0, best, best_score, have);
  return best;
}

bool respects_no_repeat(const TokenIds& ids, const DecodeConstraints& constraints) {
  std::set<TokenId> seen;
  for (TokenId t : ids) {
    if (constraints.repeatable[static_cast<std::size_t>(t)]) continue;
    if (!seen.insert(t).second) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

SyntheticCorpus synthetic_corpus(std::size_t n_audio, std::span<const LanguageId> languages, std::uint32_t d_in,
                                 std::uint32_t frames, std::size_t words_per_language, std::uint64_t seed) {
  Rng rng(seed);
  SyntheticCorpus out;
  std::map<LanguageId, std::vector<std::string>> lexicon;
  for (LanguageId lang : languages) {
    auto& words = lexicon[lang];
    for (std::size_t w = 0; w < words_per_language; ++w) {
      words.push_back(std::string(language_code(lang)) + "w" + std::to_string(w));
    }
    out.vocabularies.emplace(lang, Vocabulary::from_tokens(words));
  }
  std::map<LanguageId, std::set<std::string>> used;
  for (std::size_t i = 0; i < n_audio; ++i) {
    TrainingItem item;
    item.audio_id = "syn" + std::to_string(i);
    item.audio = Matrix(frames, d_in);
    for (Eigen::Index k = 0; k < item.audio.size(); ++k) item.audio.data()[k] = rng.normal();
    for (LanguageId lang : languages) {
      std::string caption;
      do {
        std::vector<std::size_t> order(words_per_language);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(std::span(order));
        const std::size_t len = rng.between(4, 6);
        caption.clear();
        for (std::size_t k = 0; k < len; ++k) caption += (k ? " " : "") + lexicon[lang][order[k]];
      } while (!used[lang].insert(caption).second);
      item.captions[lang] = {caption};
    }
    out.items.push_back(std::move(item));
  }
  return out;
}

}  // namespace aacap::testing
