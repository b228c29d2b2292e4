// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>

#include "aacap/error.hpp"
#include "aacap/training.hpp"
#include "support.hpp"

using namespace aacap;

namespace {

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.d_in = 8;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_len = 12;
  return c;
}

std::vector<std::pair<LanguageId, std::size_t>> head_sizes(const testing::SyntheticCorpus& c) {
  std::vector<std::pair<LanguageId, std::size_t>> out;
  for (const auto& [l, v] : c.vocabularies) out.emplace_back(l, v.size());
  return out;
}

std::vector<Matrix> snapshot(MultilingualModel& m) {
  std::vector<Matrix> out;
  for (auto& p : m.parameters()) out.push_back(p.param->value);
  return out;
}

// Expected masked fraction along one axis by enumerating every (width, start)
// combination of every mask.
double expected_axis_fraction(std::size_t extent, std::size_t n_masks, std::size_t max_width) {
  struct Outcome {
    std::vector<bool> covered;
    double p;
  };
  std::vector<Outcome> states{{std::vector<bool>(extent, false), 1.0}};
  const std::size_t wmax = std::min(max_width, extent);
  for (std::size_t m = 0; m < n_masks; ++m) {
    std::vector<Outcome> next;
    for (const auto& s : states) {
      for (std::size_t w = 0; w <= wmax; ++w) {
        for (std::size_t start = 0; start + w <= extent; ++start) {
          Outcome o = s;
          o.p *= 1.0 / double(wmax + 1) / double(extent - w + 1);
          for (std::size_t k = start; k < start + w; ++k) o.covered[k] = true;
          next.push_back(std::move(o));
        }
      }
    }
    states = std::move(next);
  }
  double e = 0.0;
  for (const auto& s : states) e += s.p * double(std::count(s.covered.begin(), s.covered.end(), true)) / double(extent);
  return e;
}

}  // namespace

TEST_CASE("smoothed cross-entropy examples") {
  const std::vector<TokenIds> t1{{1}};
  CHECK(smoothed_cross_entropy(std::vector<Matrix>{row({0.0, 1000.0, 0.0, 0.0})}, t1, 0.0) == 0.0);
  for (double eps : {0.0, 0.1, 0.3}) {
    CHECK(smoothed_cross_entropy(std::vector<Matrix>{Matrix::Zero(3, 7)}, std::vector<TokenIds>{{4, 5, 6}}, eps) ==
          doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  // Two positions, eps 0.1, V 4; value computed by hand from the smoothed
  // one-hot target (0.9 on the reference, 0.1/3 elsewhere).
  Matrix logits(3, 4);
  logits << 1.0, 2.0, 0.0, -1.0, 0.5, -0.5, 0.25, 0.0, 9.0, 9.0, 9.0, 9.0;
  const std::vector<TokenIds> targets{{1, 3, Vocabulary::kPad}};
  CHECK(smoothed_cross_entropy(std::vector<Matrix>{logits}, targets, 0.1) ==
        doctest::Approx(1.0723120949820117).epsilon(1e-12));

  CHECK_THROWS_AS(smoothed_cross_entropy(std::vector<Matrix>{Matrix::Zero(2, 4)},
                                         std::vector<TokenIds>{{Vocabulary::kPad, Vocabulary::kPad}}, 0.1),
                  Error);
}

TEST_CASE("smoothed cross-entropy gradient") {
  Rng rng(1);
  std::vector<Matrix> logits{Matrix(4, 6), Matrix(2, 6)};
  for (auto& m : logits) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  }
  const std::vector<TokenIds> a{{4, 5, 2, 0}, {3, 2}}, b{{5, 4, 0, 0}, {4, 5}};
  const WeightedTargets sources[] = {{a, 0.3}, {b, 0.7}};
  const LossAndGrad lg = mixed_smoothed_cross_entropy(logits, sources, 0.2);
  const double h = 1e-6;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    for (Eigen::Index i = 0; i < logits[k].size(); ++i) {
      auto up = logits, down = logits;
      up[k].data()[i] += h;
      down[k].data()[i] -= h;
      const double numeric = (mixed_smoothed_cross_entropy(up, sources, 0.2).loss -
                              mixed_smoothed_cross_entropy(down, sources, 0.2).loss) /
                             (2 * h);
      CHECK(lg.dlogits[k].data()[i] == doctest::Approx(numeric).epsilon(1e-6));
    }
  }
}

TEST_CASE("mixup embeddings") {
  Rng rng(2);
  Matrix a(3, 4), b(3, 4);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = rng.normal();
    b.data()[i] = rng.normal();
  }
  CHECK(mixup_embeddings(a, b, 1.0) == a);
  CHECK(mixup_embeddings(Matrix::Zero(2, 2), Matrix::Constant(2, 2, 2.0), 0.5) == Matrix::Constant(2, 2, 1.0));
  CHECK_THROWS_AS(mixup_embeddings(a, Matrix::Zero(2, 4), 0.5), Error);
  CHECK_THROWS_AS(mixup_embeddings(a, b, 1.5), Error);

  Rng draws(2025);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const MixupDraw d = draw_mixup(8, 0.4, draws);
    CHECK(d.lambda >= 0.0);
    CHECK(d.lambda <= 1.0);
    sum += d.lambda;
    std::vector<std::size_t> sorted = d.partner;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k) REQUIRE(sorted[k] == k);
  }
  CHECK(std::abs(sum / n - 0.5) <= 0.02);
}

TEST_CASE("spec_mask") {
  Rng rng(3);
  Matrix seq = Matrix::Constant(10, 16, 1.0);
  SpecAugConfig none{0, 4, 0, 4};
  CHECK(spec_mask(seq, none, rng) == seq);

  Matrix full = seq;
  apply_masks(full, MaskPlan{{{0, 10}}, {{0, 16}}});
  CHECK(full.isZero());
  Matrix bad = seq;
  CHECK_THROWS_AS(apply_masks(bad, MaskPlan{{{8, 3}}, {}}), Error);

  const SpecAugConfig cfg{2, 4, 2, 5};
  const double ft = expected_axis_fraction(10, 2, 4), fc = expected_axis_fraction(16, 2, 5);
  const double expected = 1.0 - (1.0 - ft) * (1.0 - fc);
  Rng draws(77);
  double sum = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Matrix m = spec_mask(seq, cfg, draws);
    sum += double((m.array() == 0.0).count()) / double(m.size());
  }
  CHECK(std::abs(sum / n - expected) < 0.01);
}

TEST_CASE("cosine learning rate") {
  CHECK(cosine_lr(0, 100, 5e-4) == 5e-4);
  CHECK(cosine_lr(100, 100, 5e-4) == 0.0);
  CHECK(cosine_lr(50, 100, 5e-4) == doctest::Approx(2.5e-4).epsilon(1e-12));
  double prev = 1.0;
  for (int e = 0; e <= 400; ++e) {
    const double lr = cosine_lr(e, 400, 5e-4);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("AdamW decoupled decay") {
  nn::Param w(2, 3, nn::ParamKind::kWeight), b(1, 3, nn::ParamKind::kBias);
  w.value.setConstant(0.8);
  b.value.setConstant(0.8);
  AdamW opt({0.9, 0.999, 1e-8, 2.0});
  const std::vector<nn::NamedParam> params{{"w", &w}, {"b", &b}};
  const double lr = 5e-4;
  double expected = 0.8;
  for (int step = 0; step < 5; ++step) {
    opt.step(params, lr);
    expected *= 1.0 - lr * 2.0;
    CHECK(w.value == Matrix::Constant(2, 3, expected));
    CHECK(b.value == Matrix::Constant(1, 3, 0.8));
  }
  CHECK(opt.step_count(&w) == 5);

  nn::Param g(1, 1, nn::ParamKind::kBias);
  g.grad(0, 0) = -0.3;
  AdamW plain({0.9, 0.999, 1e-8, 0.0});
  plain.step(std::vector<nn::NamedParam>{{"g", &g}}, 0.01);
  CHECK(g.value(0, 0) == doctest::Approx(0.01 * 0.3 / (0.3 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("multilingual epoch coverage") {
  const std::vector<LanguageId> langs(kAllLanguages.begin(), kAllLanguages.end());
  const auto corpus = testing::synthetic_corpus(50, langs, 8, 3, 12, 1);
  MultilingualModel model(tiny_model(), head_sizes(corpus));
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 2;
  Trainer trainer(model, corpus.vocabularies, cfg);
  std::multiset<std::pair<std::string, LanguageId>> seen;
  trainer.on_update = [&](const UpdateInfo& u) {
    for (const auto& id : u.audio_ids) seen.emplace(id, u.language);
  };
  for (std::uint32_t e = 0; e < 2; ++e) {
    seen.clear();
    const EpochMetrics m = trainer.train_epoch(corpus.items, langs, e);
    CHECK(m.n_updates == 200);
    CHECK(m.n_examples == 200);
    CHECK(seen.size() == 200);
    for (const auto& item : corpus.items) {
      for (LanguageId l : langs) CHECK(seen.count({item.audio_id, l}) == 1);
    }
  }

  // One language is an ordinary monolingual epoch; larger batches keep coverage exact.
  MultilingualModel mono(tiny_model(), head_sizes(corpus));
  cfg.batch_size = 7;
  Trainer mono_trainer(mono, corpus.vocabularies, cfg);
  seen.clear();
  mono_trainer.on_update = trainer.on_update;
  const std::vector<LanguageId> en{LanguageId::kEn};
  const EpochMetrics m = mono_trainer.train_epoch(corpus.items, en, 0);
  CHECK(m.n_examples == 50);
  CHECK(m.n_updates == 8);
  CHECK(seen.size() == 50);
}

TEST_CASE("missing language is reported") {
  const std::vector<LanguageId> en{LanguageId::kEn};
  auto corpus = testing::synthetic_corpus(3, en, 8, 2, 6, 2);
  MultilingualModel model(tiny_model(), head_sizes(corpus));
  Trainer trainer(model, corpus.vocabularies, TrainConfig{});
  const std::vector<LanguageId> both{LanguageId::kEn, LanguageId::kFr};
  CHECK_THROWS_AS(trainer.train_epoch(corpus.items, both, 0), Error);
}

TEST_CASE("an update leaves other language heads untouched") {
  const std::vector<LanguageId> langs(kAllLanguages.begin(), kAllLanguages.end());
  const auto corpus = testing::synthetic_corpus(6, langs, 8, 3, 10, 3);
  MultilingualModel model(tiny_model(), head_sizes(corpus));
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 3;
  Trainer trainer(model, corpus.vocabularies, cfg);
  std::map<LanguageId, std::vector<Matrix>> before;
  std::vector<Matrix> trunk_before;
  auto capture = [&] {
    trunk_before.clear();
    for (auto& p : model.trunk_parameters()) trunk_before.push_back(p.param->value);
    for (LanguageId l : langs) {
      before[l].clear();
      for (auto& p : model.head_parameters(l)) before[l].push_back(p.param->value);
    }
  };
  capture();
  std::size_t updates = 0;
  trainer.on_update = [&](const UpdateInfo& u) {
    ++updates;
    for (LanguageId l : langs) {
      auto params = model.head_parameters(l);
      bool same = true;
      for (std::size_t i = 0; i < params.size(); ++i) same = same && params[i].param->value == before[l][i];
      CHECK(same == (l != u.language));
    }
    auto trunk = model.trunk_parameters();
    bool trunk_changed = false;
    for (std::size_t i = 0; i < trunk.size(); ++i) trunk_changed |= trunk[i].param->value != trunk_before[i];
    CHECK(trunk_changed);
    capture();
  };
  for (std::uint32_t e = 0; e < 3; ++e) trainer.train_epoch(corpus.items, langs, e);
  CHECK(updates == 3 * 4 * 2);
}

TEST_CASE("training is deterministic under a fixed seed") {
  const std::vector<LanguageId> langs{LanguageId::kEn, LanguageId::kDe};
  const auto corpus = testing::synthetic_corpus(8, langs, 8, 3, 10, 4);
  auto run = [&](std::uint64_t seed) {
    ModelConfig mc = tiny_model();
    mc.init_seed = seed;
    MultilingualModel model(mc, head_sizes(corpus));
    TrainConfig cfg;
    cfg.batch_size = 3;
    cfg.epochs = 3;
    cfg.seed = seed;
    Trainer trainer(model, corpus.vocabularies, cfg);
    for (std::uint32_t e = 0; e < 3; ++e) trainer.train_epoch(corpus.items, langs, e);
    return snapshot(model);
  };
  CHECK(run(5) == run(5));
  CHECK(run(5) != run(6));
}

TEST_CASE("mixup with lambda 1 matches plain training step for step") {
  const std::vector<LanguageId> langs{LanguageId::kFr, LanguageId::kEs};
  const auto corpus = testing::synthetic_corpus(9, langs, 8, 3, 10, 5);
  auto run = [&](bool mixup) {
    MultilingualModel model(tiny_model(), head_sizes(corpus));
    TrainConfig cfg;
    cfg.batch_size = 4;
    cfg.epochs = 3;
    cfg.label_smoothing_eps = 0.0;
    cfg.mixup = mixup;
    cfg.mixup_fixed_lambda = 1.0;
    Trainer trainer(model, corpus.vocabularies, cfg);
    std::vector<std::vector<Matrix>> steps;
    trainer.on_update = [&](const UpdateInfo&) { steps.push_back(snapshot(model)); };
    for (std::uint32_t e = 0; e < 3; ++e) trainer.train_epoch(corpus.items, langs, e);
    return steps;
  };
  const auto mixed = run(true), plain = run(false);
  REQUIRE(mixed.size() == plain.size());
  for (std::size_t s = 0; s < mixed.size(); ++s) CHECK(mixed[s] == plain[s]);
}

TEST_CASE("loss falls on a small corpus") {
  const std::vector<LanguageId> en{LanguageId::kEn};
  const auto corpus = testing::synthetic_corpus(10, en, 8, 3, 16, 6);
  ModelConfig mc = tiny_model();
  mc.d_model = 32;
  mc.d_ff = 64;
  mc.frontend_dropout = 0.0;
  mc.trunk_dropout = 0.0;
  MultilingualModel model(mc, head_sizes(corpus));
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 10;
  cfg.lr0 = 3e-3;
  cfg.weight_decay = 0.01;
  cfg.label_smoothing_eps = 0.0;
  cfg.mixup = false;
  cfg.spec_augment = false;
  Trainer trainer(model, corpus.vocabularies, cfg);
  const double initial = trainer.evaluate_loss(corpus.items, en);
  for (std::uint32_t e = 0; e < cfg.epochs; ++e) trainer.train_epoch(corpus.items, en, e);
  const double final_loss = trainer.evaluate_loss(corpus.items, en);
  MESSAGE("initial " << initial << " final " << final_loss);
  CHECK(final_loss < 0.1 * initial);
}

TEST_CASE("config json roundtrip") {
  TrainConfig c;
  c.epochs = 7;
  c.mixup_fixed_lambda = 0.25;
  c.specaug.max_channel_width = 3;
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(back.epochs == 7);
  CHECK(back.mixup_fixed_lambda == 0.25);
  CHECK(back.specaug.max_channel_width == 3);
  CHECK(train_config_to_json(back) == train_config_to_json(c));
  c.lr0 = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}
