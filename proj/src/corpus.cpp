// SPDX-License-Identifier: Apache-2.0

#include "aacap/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "aacap/error.hpp"

namespace aacap {

namespace {

constexpr char kMagic[4] = {'A', 'E', 'M', 'B'};
constexpr std::size_t kHeaderSize = 16;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

}  // namespace

std::string encode_embedding(const EmbeddingSequence& seq) {
  if (seq.data.size() != static_cast<std::size_t>(seq.frames) * seq.dim) {
    throw Error(ErrorKind::kShapeMismatch, "embedding data size does not match frames*dim");
  }
  std::string out(kMagic, 4);
  put_u32(out, kEmbeddingFormatVersion);
  put_u32(out, seq.dim);
  put_u32(out, seq.frames);
  out.reserve(kHeaderSize + seq.data.size() * 4);
  for (float f : seq.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

EmbeddingSequence decode_embedding(std::string_view bytes, std::string audio_id, std::uint32_t expected_dim) {
  if (bytes.size() < kHeaderSize) throw Error(ErrorKind::kPayloadLength, "payload length mismatch: truncated header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error(ErrorKind::kBadMagic, "bad magic: expected AEMB");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kEmbeddingFormatVersion) {
    throw Error(ErrorKind::kBadVersion, "unsupported AEMB version " + std::to_string(version));
  }
  EmbeddingSequence seq;
  seq.audio_id = std::move(audio_id);
  seq.dim = get_u32(bytes, 8);
  seq.frames = get_u32(bytes, 12);
  if (seq.dim == 0 || seq.frames == 0) throw Error(ErrorKind::kShapeMismatch, "embedding shape must be nonzero");
  if (expected_dim != 0 && seq.dim != expected_dim) {
    throw Error(ErrorKind::kShapeMismatch,
                "embedding dim " + std::to_string(seq.dim) + " != expected " + std::to_string(expected_dim));
  }
  const std::uint64_t count = static_cast<std::uint64_t>(seq.frames) * seq.dim;
  if (bytes.size() - kHeaderSize != count * 4) {
    throw Error(ErrorKind::kPayloadLength, "payload length mismatch: expected " + std::to_string(count * 4) +
                                               " bytes, found " + std::to_string(bytes.size() - kHeaderSize));
  }
  seq.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float f = std::bit_cast<float>(get_u32(bytes, kHeaderSize + 4 * i));
    if (!std::isfinite(f)) {
      throw Error(ErrorKind::kNonFinite, "non-finite value at frame " + std::to_string(i / seq.dim) + ", channel " +
                                             std::to_string(i % seq.dim));
    }
    seq.data[i] = f;
  }
  return seq;
}

void save_embedding(const std::filesystem::path& path, const EmbeddingSequence& seq) {
  detail::write_file(path, encode_embedding(seq));
}

EmbeddingSequence load_embedding(const std::filesystem::path& path, std::uint32_t expected_dim) {
  return decode_embedding(detail::read_file(path), path.stem().string(), expected_dim);
}

std::filesystem::path embedding_path(const std::filesystem::path& dir, std::string_view audio_id) {
  return dir / (std::string(audio_id) + ".aemb");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Manifest

CaptionManifest::CaptionManifest(std::vector<ManifestEntry> entries) : entries_(std::move(entries)) {}

CaptionManifest CaptionManifest::parse(std::string_view jsonl) {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> problems;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < jsonl.size()) {
    std::size_t end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    const std::string_view line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "line " + std::to_string(line_no);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      problems.push_back(where + ": invalid JSON (" + e.what() + ")");
      continue;
    }
    if (!j.is_object() || !j.contains("audio_id") || !j["audio_id"].is_string() || !j.contains("split") ||
        !j["split"].is_string() || !j.contains("captions") || !j["captions"].is_object()) {
      problems.push_back(where + ": expected {audio_id, split, captions}");
      continue;
    }
    ManifestEntry entry;
    entry.audio_id = j["audio_id"].get<std::string>();
    if (entry.audio_id.empty()) {
      problems.push_back(where + ": empty audio_id");
      continue;
    }
    const auto split = parse_split(j["split"].get<std::string>());
    if (!split) {
      problems.push_back(where + ": unknown split '" + j["split"].get<std::string>() + "'");
      continue;
    }
    entry.split = *split;
    bool ok = true;
    for (const auto& [code, caps] : j["captions"].items()) {
      const auto lang = parse_language(code);
      if (!lang) {
        problems.push_back(where + ": unknown language '" + code + "'");
        ok = false;
        continue;
      }
      if (!caps.is_array() || caps.empty()) {
        problems.push_back(where + ": language '" + code + "' needs a nonempty caption list");
        ok = false;
        continue;
      }
      std::vector<std::string> list;
      for (const auto& c : caps) {
        if (!c.is_string()) {
          problems.push_back(where + ": non-string caption for '" + code + "'");
          ok = false;
          break;
        }
        list.push_back(c.get<std::string>());
      }
      entry.captions[*lang] = std::move(list);
    }
    if (!seen.insert(entry.audio_id).second) {
      problems.push_back(where + ": duplicate audio_id '" + entry.audio_id + "'");
      ok = false;
    }
    if (ok) entries.push_back(std::move(entry));
  }
  if (!problems.empty()) throw Error(ErrorKind::kParse, "malformed manifest", std::move(problems));
  return CaptionManifest(std::move(entries));
}

CaptionManifest CaptionManifest::load(const std::filesystem::path& path) { return parse(detail::read_file(path)); }

std::string CaptionManifest::to_jsonl() const {
  std::string out;
  for (const auto& e : entries_) {
    nlohmann::ordered_json j;
    j["audio_id"] = e.audio_id;
    j["split"] = split_name(e.split);
    nlohmann::ordered_json caps = nlohmann::ordered_json::object();
    for (const auto& [lang, list] : e.captions) caps[std::string(language_code(lang))] = list;
    j["captions"] = std::move(caps);
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

std::vector<const ManifestEntry*> CaptionManifest::split(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries_) {
    if (e.split == split) out.push_back(&e);
  }
  return out;
}

bool CaptionManifest::has_language(LanguageId lang) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.captions.contains(lang); });
}

std::vector<LanguageId> CaptionManifest::languages() const {
  std::vector<LanguageId> out;
  for (LanguageId lang : kAllLanguages) {
    if (has_language(lang)) out.push_back(lang);
  }
  return out;
}

std::vector<CaptionRecord> CaptionManifest::records(Split split, LanguageId lang) const {
  std::vector<CaptionRecord> out;
  for (const auto& e : entries_) {
    if (e.split != split) continue;
    const auto it = e.captions.find(lang);
    if (it == e.captions.end()) continue;
    out.push_back({e.audio_id, lang, it->second});
  }
  return out;
}

std::map<std::string, std::vector<std::string>> CaptionManifest::references(Split split, LanguageId lang) const {
  std::map<std::string, std::vector<std::string>> out;
  for (auto& r : records(split, lang)) out.emplace(std::move(r.audio_id), std::move(r.captions));
  return out;
}

std::vector<std::string> CaptionManifest::validate(std::span<const LanguageId> languages,
                                                   const std::filesystem::path& embeddings_dir,
                                                   std::uint32_t expected_dim) const {
  std::vector<std::string> problems;
  for (const auto& e : entries_) {
    for (LanguageId lang : languages) {
      if (!e.captions.contains(lang)) {
        problems.push_back(e.audio_id + ": missing captions for language '" + std::string(language_code(lang)) + "'");
      }
    }
    const auto path = embedding_path(embeddings_dir, e.audio_id);
    if (!std::filesystem::exists(path)) {
      problems.push_back(e.audio_id + ": missing embedding file " + path.string());
      continue;
    }
    try {
      (void)load_embedding(path, expected_dim);
    } catch (const Error& err) {
      problems.push_back(e.audio_id + ": invalid embedding (" + err.what() + ")");
    }
  }
  return problems;
}

const std::string& sample_caption(const CaptionRecord& record, Rng& rng) {
  if (record.captions.empty()) {
    throw Error(ErrorKind::kMissingData, "record " + record.audio_id + " has no captions");
  }
  if (record.captions.size() == 1) return record.captions.front();
  return record.captions[rng.index(record.captions.size())];
}

CorpusStats compute_stats(const CaptionManifest& manifest, LanguageId lang, Split split) {
  if (!manifest.has_language(lang)) {
    throw Error(ErrorKind::kMissingData,
                "manifest has no captions in language '" + std::string(language_code(lang)) + "'");
  }
  CorpusStats stats;
  stats.language = lang;
  stats.split = split;
  std::size_t total_tokens = 0;
  std::unordered_set<std::string> types;
  for (const auto& record : manifest.records(split, lang)) {
    for (const auto& caption : record.captions) {
      const Tokens toks = tokenize(caption);
      total_tokens += toks.size();
      types.insert(toks.begin(), toks.end());
      ++stats.n_captions;
    }
  }
  stats.word_types = types.size();
  stats.avg_sentence_length =
      stats.n_captions == 0 ? 0.0 : static_cast<double>(total_tokens) / static_cast<double>(stats.n_captions);
  return stats;
}

}  // namespace aacap
