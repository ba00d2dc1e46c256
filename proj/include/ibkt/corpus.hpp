// Copyright 2026 The ibkt Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ibkt/error.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/trainer.hpp"

namespace ibkt::corpus {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Plain line files

// Splits on '\n' and strips a trailing '\r'. A final line without a newline
// counts; a trailing newline does not start an empty line.
std::vector<std::string> split_lines(std::string_view text);
std::string read_file(const fs::path& path);
std::vector<std::string> read_lines(const fs::path& path);
void write_lines(const fs::path& path, const std::vector<std::string>& lines);
// Empty or whitespace-only.
bool is_blank(std::string_view line);

// ---------------------------------------------------------------------------
// Ingestion and manifest

struct FileRecord {
  fs::path path;
  std::size_t bytes = 0;
  std::string sha256;
};

struct ManifestEntry {
  std::string name;  // "hi" or "bn-hi"
  std::string kind;  // "mono" or "parallel"
  std::size_t lines = 0;    // kept lines (pairs for parallel)
  std::size_t dropped = 0;  // blank lines (pairs with a blank side)
  std::vector<FileRecord> files;  // parallel: src then tgt

  std::size_t raw_lines() const { return lines + dropped; }
};

struct MonoCorpus {
  ManifestEntry entry;
  std::vector<std::string> lines;
};

struct ParallelCorpus {
  ManifestEntry entry;
  std::vector<std::string> src, tgt;
};

// Throws FormatError with the byte offset of the first invalid UTF-8
// sequence.
MonoCorpus ingest_mono(const fs::path& path, const LangCode& lang);
// Throws Error "<pair>: line counts differ: n ≠ m" on misaligned files.
ParallelCorpus ingest_parallel(const fs::path& src, const fs::path& tgt,
                               const trainer::LangPair& pair);

class Manifest {
 public:
  void add(ManifestEntry e);
  const std::vector<ManifestEntry>& entries() const { return entries_; }
  const ManifestEntry* find(std::string_view name, std::string_view kind) const;

  // One row per file:
  // name kind lines dropped path bytes sha256
  std::string to_tsv() const;
  static Manifest parse_tsv(std::string_view text);
  void save(const fs::path& path) const;
  static Manifest load(const fs::path& path);

  // Rehashes every file; throws Error naming the first file whose size or
  // digest changed.
  void verify() const;

 private:
  std::vector<ManifestEntry> entries_;
};

// ---------------------------------------------------------------------------
// Run configuration

class ConfigError : public Error {
 public:
  using Error::Error;
};

// UTF-8 "key = value" lines; '#' starts a comment, blank lines ignored.
class RunConfig {
 public:
  RunConfig() = default;
  static RunConfig parse(std::string_view text, fs::path base_dir = {});
  static RunConfig load(const fs::path& path);

  bool has(std::string_view key) const;
  // Throws ConfigError naming the key when missing or malformed.
  std::string get(std::string_view key) const;
  std::string get_or(std::string_view key, std::string_view fallback) const;
  std::size_t get_size(std::string_view key, std::size_t fallback) const;
  double get_double(std::string_view key, double fallback) const;
  bool get_bool(std::string_view key, bool fallback) const;
  std::vector<std::string> get_list(std::string_view key) const;
  // Relative paths resolve against the config file's directory.
  fs::path get_path(std::string_view key) const;

  void set(std::string key, std::string value);
  const std::map<std::string, std::string>& values() const { return values_; }
  const fs::path& base_dir() const { return base_dir_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
  fs::path base_dir_;
};

// Environment variable naming the directory that relative run_dir values
// live under (default: the working directory).
inline constexpr const char* kRunRootEnv = "IBKT_RUN_ROOT";

fs::path resolve_run_dir(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Pipeline

class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineResult {
  fs::path run_dir;
  std::vector<std::string> stages;
  // pair -> corpus score (BLEU, or ROUGE-L F1 for summarization)
  std::map<std::string, double> scores;
};

// Stages in order: ingest, transliterate, vocab, pretrain, finetune, decode,
// score. `stages` selects among the last five; ingest and transliterate
// always run. Throws StageError.
PipelineResult run_pipeline(const RunConfig& cfg);

// Logs the error and returns a nonzero status instead of throwing.
int pipeline(const RunConfig& cfg);

}  // namespace ibkt::corpus
