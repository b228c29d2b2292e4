// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "aacap/cli.hpp"
#include "aacap/error.hpp"
#include "support.hpp"
#include "test_util.hpp"

using namespace aacap;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<json> read_jsonl(const std::filesystem::path& p) {
  std::vector<json> out;
  std::istringstream in(detail::read_file(p));
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

// Six audios (4 train, 1 val, 1 test) captioned in all four languages.
struct Fixture {
  testing::TempDir dir;
  std::filesystem::path manifest = dir / "manifest.jsonl";
  std::filesystem::path emb = dir / "emb";
  std::filesystem::path config = dir / "train.json";

  Fixture() {
    Rng rng(1);
    const char* words[] = {"dog", "barks", "rain", "falls", "car", "passes", "bird", "sings"};
    std::string manifest_text;
    for (int i = 0; i < 6; ++i) {
      const std::string id = "clip" + std::to_string(i);
      save_embedding(embedding_path(emb, id), testing::random_embedding(id, 3, 16, rng));
      json caps;
      for (LanguageId l : kAllLanguages) {
        const std::string code(language_code(l));
        caps[code] = {code + " " + words[i % 8] + " " + words[(i + 1) % 8], std::string("the ") + words[(i + 3) % 8]};
      }
      const char* split = i < 4 ? "train" : (i == 4 ? "val" : "test");
      manifest_text += json{{"audio_id", id}, {"split", split}, {"captions", caps}}.dump() + "\n";
    }
    detail::write_file(manifest, manifest_text);
    const json cfg = {{"manifest", "manifest.jsonl"},
                      {"embeddings_dir", "emb"},
                      {"languages", {"en", "fr", "es", "de"}},
                      {"out", "run"},
                      {"model", {{"d_in", 16}, {"d_model", 8}, {"n_layers", 1}, {"n_heads", 2}, {"d_ff", 16}}},
                      {"train", {{"epochs", 3}, {"batch_size", 2}}}};
    detail::write_file(config, cfg.dump(2));
  }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  const Run r = run({"params", "--vocab-sizes", "en=12,zz=4"});
  CHECK(r.code == 2);
  CHECK(json::parse(r.err).at("error") == "unknown_language");
  CHECK(run({"--version"}).out == std::string(cli::kToolkitVersion) + "\n");
}

TEST_CASE("params reproduces the reference accounting") {
  testing::TempDir out;
  const Run r = run({"params", "--vocab-sizes", "en=4861,fr=5797,es=5889,de=9391", "--out", out.path().string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("68.91%") != std::string::npos);
  const json j = json::parse(detail::read_file(out / "params.json"));
  CHECK(j.at("monolingual").at("en").at("heads").at(0).at("classifier") == 1'249'277);
  CHECK(j.at("multilingual").at("total") == j.at("multilingual").at("trainable").get<std::uint64_t>() + 28'000'000);
  CHECK(std::filesystem::exists(out / "run_manifest.json"));
}

TEST_CASE("prepare and stats") {
  Fixture f;
  const auto out = f.dir / "prep";
  const Run r = run({"prepare", "--manifest", f.manifest.string(), "--embeddings-dir", f.emb.string(), "--languages",
                     "en,fr,es,de", "--out", out.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (LanguageId l : kAllLanguages) {
    CHECK(std::filesystem::exists(out / ("vocab_" + std::string(language_code(l)) + ".json")));
  }
  const json index = json::parse(detail::read_file(out / "index.json"));
  CHECK(index.at("splits").at("train").size() == 4);
  CHECK(index.at("embedding_dim") == 16);
  const json manifest = json::parse(detail::read_file(out / "run_manifest.json"));
  CHECK(manifest.at("inputs").at("manifest") == cli::file_digest(f.manifest));
  CHECK(manifest.at("toolkit_version") == cli::kToolkitVersion);

  // Missing embedding: every problem is listed.
  std::filesystem::remove(embedding_path(f.emb, "clip2"));
  std::filesystem::remove(embedding_path(f.emb, "clip5"));
  const Run bad = run({"prepare", "--manifest", f.manifest.string(), "--embeddings-dir", f.emb.string(), "--languages",
                       "en", "--out", out.string()});
  CHECK(bad.code == 2);
  CHECK(json::parse(bad.err).at("items").size() == 2);

  const Run empty = run({"prepare", "--manifest", f.manifest.string(), "--embeddings-dir", f.emb.string(),
                         "--languages", "", "--out", out.string()});
  CHECK(empty.code == 2);

  const Run stats = run({"stats", "--manifest", f.manifest.string(), "--split", "train", "--split", "val"});
  REQUIRE(stats.code == 0);
  std::istringstream lines(stats.out);
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line);) ++n;
  CHECK(n == 1 + 8);
  // en train: 8 captions of 3 or 2 tokens
  CHECK(stats.out.find("en    train           8           2.5           9") != std::string::npos);
}

TEST_CASE("stats on an empty split is zeros") {
  testing::TempDir dir;
  detail::write_file(dir / "m.jsonl", R"({"audio_id": "a", "split": "train", "captions": {"en": ["a b c", "a b"]}})");
  testing::TempDir out;
  const Run r = run({"stats", "--manifest", (dir / "m.jsonl").string(), "--languages", "en", "--split", "test",
                     "--out", out.path().string()});
  REQUIRE(r.code == 0);
  const json j = json::parse(detail::read_file(out / "stats.json"));
  CHECK(j.at(0).at("avg_sentence_length") == 0.0);
  CHECK(j.at(0).at("word_types") == 0);
}

TEST_CASE("train, caption and eval end to end") {
  Fixture f;
  const Run t1 = run({"train", "--config", f.config.string(), "--seed", "7"});
  REQUIRE_MESSAGE(t1.code == 0, t1.err);
  const auto run_dir = f.dir / "run";
  const auto metrics = read_jsonl(run_dir / "metrics.jsonl");
  REQUIRE(metrics.size() == 3);
  CHECK(metrics[0].at("lr") == 5e-4);
  CHECK(metrics[0].contains("val_loss"));
  CHECK(metrics[0].contains("seconds"));
  const json rm = json::parse(detail::read_file(run_dir / "run_manifest.json"));
  CHECK(rm.at("seed") == 7);
  CHECK(rm.at("config").at("model").at("init_seed") == 7);

  // Same seed, same bytes.
  const std::string ckpt = detail::read_file(run_dir / "checkpoint.ackp");
  const auto other = f.dir / "run2";
  REQUIRE(run({"train", "--config", f.config.string(), "--seed", "7", "--out", other.string()}).code == 0);
  CHECK(detail::read_file(other / "checkpoint.ackp") == ckpt);
  REQUIRE(run({"train", "--config", f.config.string(), "--seed", "8", "--out", other.string()}).code == 0);
  CHECK(detail::read_file(other / "checkpoint.ackp") != ckpt);

  const auto caps = f.dir / "caps";
  const Run c = run({"caption", "--checkpoint", (run_dir / "checkpoint.ackp").string(), "--embeddings-dir",
                     f.emb.string(), "--manifest", f.manifest.string(), "--split", "train", "--beam-size", "3",
                     "--out", caps.string()});
  REQUIRE_MESSAGE(c.code == 0, c.err);
  const auto lines = read_jsonl(caps / "captions.jsonl");
  CHECK(lines.size() == 16);
  CHECK(lines[0].at("decode_config").at("beam_size") == 3);
  CHECK(lines[0].contains("normalized_score"));
  const std::string first = detail::read_file(caps / "captions.jsonl");
  REQUIRE(run({"caption", "--checkpoint", (run_dir / "checkpoint.ackp").string(), "--embeddings-dir",
               f.emb.string(), "--manifest", f.manifest.string(), "--split", "train", "--beam-size", "3", "--out",
               caps.string()})
              .code == 0);
  CHECK(detail::read_file(caps / "captions.jsonl") == first);

  const auto ev = f.dir / "eval";
  const Run e = run({"eval", "--captions", (caps / "captions.jsonl").string(), "--manifest", f.manifest.string(),
                     "--split", "train", "--out", ev.string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  const json report = json::parse(detail::read_file(ev / "eval_report.json"));
  CHECK(report.at("languages").size() == 4);
  CHECK(report.at("languages").at(0).at("cider_d").get<double>() >= 0.0);

  CHECK(run({"caption", "--checkpoint", (run_dir / "checkpoint.ackp").string(), "--embeddings-dir", f.emb.string(),
             "--languages", "en", "--beam-size", "0", "--out", caps.string()})
            .code == 2);
}

TEST_CASE("eval on a perfect toy corpus") {
  testing::TempDir dir;
  detail::write_file(dir / "m.jsonl",
                     R"({"audio_id": "1", "split": "test", "captions": {"en": ["a b c d"]}})"
                     "\n"
                     R"({"audio_id": "2", "split": "test", "captions": {"en": ["e f g h"]}})");
  detail::write_file(dir / "c.jsonl",
                     R"({"audio_id": "1", "language": "en", "caption": "a b c d"})"
                     "\n"
                     R"({"audio_id": "2", "language": "en", "caption": "e f g h"})");
  detail::write_file(dir / "table.json", R"({"a b c d": [1, 0], "e f g h": [0, 1]})");
  const Run r = run({"eval", "--captions", (dir / "c.jsonl").string(), "--manifest", (dir / "m.jsonl").string(),
                     "--metrics", "cider,sbert", "--embedder-table", (dir / "table.json").string(), "--out",
                     dir.path().string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json j = json::parse(detail::read_file(dir / "eval_report.json"));
  CHECK(j.at("languages").at(0).at("cider_d_raw").get<double>() == doctest::Approx(10.0));
  CHECK(j.at("languages").at(0).at("cider_d").get<double>() == doctest::Approx(1000.0));
  CHECK(j.at("languages").at(0).at("sbert_sim").get<double>() == doctest::Approx(100.0));

  // Unreachable embedding service is a runtime failure.
  const Run down = run({"eval", "--captions", (dir / "c.jsonl").string(), "--manifest", (dir / "m.jsonl").string(),
                        "--metrics", "sbert", "--embedder-url", "http://127.0.0.1:9/embed"});
  CHECK(down.code == 3);
  CHECK(json::parse(down.err).at("error") == "provider");
}

TEST_CASE("compare-langs") {
  testing::TempDir dir;
  detail::write_file(dir / "en.jsonl",
                     R"({"audio_id": "1", "language": "en", "caption": "dog"})"
                     "\n"
                     R"({"audio_id": "2", "language": "en", "caption": "rain"})");
  detail::write_file(dir / "fr.jsonl",
                     R"({"audio_id": "1", "language": "fr", "caption": "chien"})"
                     "\n"
                     R"({"audio_id": "2", "language": "fr", "caption": "pluie"})");
  detail::write_file(dir / "t.json", R"({"dog": [1, 0], "rain": [0, 1], "chien": [1, 0], "pluie": [0.6, 0.8]})");
  const Run r = run({"compare-langs", "--captions", (dir / "en.jsonl").string(), "--captions",
                     (dir / "fr.jsonl").string(), "--embedder-table", (dir / "t.json").string(), "--out",
                     dir.path().string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const json j = json::parse(detail::read_file(dir / "compare_langs.json"));
  CHECK(j.at("similarity").at("fr").get<double>() == doctest::Approx(90.0));
  CHECK(j.at("similarity").at("en").get<double>() == doctest::Approx(100.0));

  detail::write_file(dir / "fr.jsonl", R"({"audio_id": "1", "language": "fr", "caption": "chien"})");
  CHECK(run({"compare-langs", "--captions", (dir / "en.jsonl").string(), "--captions", (dir / "fr.jsonl").string(),
             "--embedder-table", (dir / "t.json").string()})
            .code == 2);
}

TEST_CASE("digests") {
  CHECK(cli::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Fixture f;
  CHECK(cli::directory_digest(f.emb) == cli::directory_digest(f.emb));
  Fixture g;
  CHECK(cli::directory_digest(f.emb) == cli::directory_digest(g.emb));
}
