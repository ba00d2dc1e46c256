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
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ibkt/decode.hpp"
#include "ibkt/error.hpp"
#include "ibkt/model.hpp"
#include "ibkt/noiser.hpp"
#include "ibkt/rng.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/translit.hpp"

namespace ibkt::trainer {

namespace fs = std::filesystem;
using subword::TokenIds;

enum class Mode {
  kPretrain,
  kFinetuneBi,
  kFinetuneM2O,
  kFinetuneO2M,
  kFinetuneSummarizationMulti,
};

Mode parse_mode(std::string_view name);
std::string mode_name(Mode mode);

struct LangPair {
  LangCode src, tgt;

  // "bn-hi"
  std::string str() const;
  static LangPair parse(std::string_view text);
  auto operator<=>(const LangPair&) const = default;
};

struct TaskSpec {
  Mode mode = Mode::kFinetuneBi;
  std::vector<LangCode> languages;  // pretrain only
  std::vector<LangPair> pairs;
  bool unify_script = true;
  std::size_t max_src_len = 256;
  std::size_t max_tgt_len = 256;

  // 512 / 64 length caps.
  static TaskSpec summarization(std::vector<LangPair> pairs);
  void validate() const;
};

// ---------------------------------------------------------------------------
// Batching

struct Example {
  TokenIds encoder;
  TokenIds decoder_input;
  TokenIds labels;

  std::size_t length() const {
    return std::max(encoder.size(), decoder_input.size());
  }
};

// encoder = src + [EOS, src tag], decoder_input = [tgt tag] + tgt,
// labels = tgt + [EOS]; sides cut to the length caps.
Example make_translation_example(const subword::SubwordVocab& vocab,
                                 std::string_view src, const LangCode& src_lang,
                                 std::string_view tgt, const LangCode& tgt_lang,
                                 std::size_t max_src_len,
                                 std::size_t max_tgt_len);

// One epoch of index batches: shuffle, stable sort by length, greedy packing
// with max_len * count <= tokens_per_batch, shuffled batch order. Longer
// examples are skipped with a warning.
std::vector<std::vector<std::size_t>> make_batches(
    std::span<const std::size_t> lengths, std::size_t tokens_per_batch,
    std::uint64_t seed);
std::vector<std::vector<std::size_t>> make_batches(
    const std::vector<Example>& examples, std::size_t tokens_per_batch,
    std::uint64_t seed);

model::Batch collate(const std::vector<Example>& examples,
                     std::span<const std::size_t> indices);

// Index drawn with probability proportional to weight^(1/temperature).
std::size_t sample_index(std::span<const double> weights, double temperature,
                         Rng& rng);
LangCode sample_language(const std::vector<std::pair<LangCode, double>>& weights,
                         double temperature, Rng& rng);

// Infinite stream of batches over one example set; epoch e uses seed
// (seed, e). The cursor is part of resumable state.
class BatchStream {
 public:
  BatchStream() = default;
  BatchStream(std::vector<std::size_t> lengths, std::size_t tokens_per_batch,
              std::uint64_t seed);

  const std::vector<std::size_t>& next();
  std::size_t epoch() const { return epoch_; }
  std::size_t position() const { return position_; }
  void seek(std::size_t epoch, std::size_t position);

 private:
  void fill();

  std::vector<std::size_t> lengths_;
  std::size_t tokens_per_batch_ = 0;
  std::uint64_t seed_ = 0;
  std::size_t epoch_ = 0;
  std::size_t position_ = 0;
  std::vector<std::vector<std::size_t>> batches_;
};

// ---------------------------------------------------------------------------
// One optimizer step

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

struct StepStats {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool skipped = false;  // non-finite gradient
};

// Forward/backward/clip/Adam for update number `step` (1-based) with the
// dropout stream derived from (seed, step).
StepStats train_step(model::Model& model, model::AdamState& adam,
                     const model::Batch& batch, std::size_t step,
                     const model::TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainOptions {
  fs::path ckpt_dir;   // empty: no checkpoints
  fs::path log_path;   // empty: no per-step log
  std::optional<fs::path> resume_from;
  // Called after every step.
  std::function<void(std::size_t step, const StepStats&)> on_step;
};

struct PretrainResult {
  model::Model model;
  std::vector<double> losses;  // one per step run in this call
  std::vector<fs::path> checkpoints;
  std::size_t skipped_sentences = 0;
};

// Denoising training over monolingual corpora (already in the model's
// script). Each step trains on one language drawn by sample_language with
// corpus sizes as weights; noise is redrawn every step.
PretrainResult pretrain(const subword::SubwordVocab& vocab,
                        const std::vector<subword::LangCorpus>& corpora,
                        const noiser::NoiserConfig& noise,
                        const model::ModelConfig& model_cfg,
                        const model::TrainConfig& cfg,
                        const PretrainOptions& opts);

// Mean noised-reconstruction loss (eval mode, no dropout, eps as in cfg)
// on held-out sentences with noise seeded by `seed`.
double denoising_loss(const model::Model& model,
                      const subword::SubwordVocab& vocab,
                      const std::vector<subword::LangCorpus>& corpora,
                      const noiser::NoiserConfig& noise, double label_smoothing,
                      std::size_t tokens_per_batch, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dev history and checkpoint selection

enum class MetricKind { kBleu, kRougeLF1 };

inline constexpr std::string_view kGlobalPair = "global";

struct DevRecord {
  std::size_t step = 0;
  std::string pair;
  double metric = 0.0;
  std::string ckpt;
};

class DevHistory {
 public:
  DevHistory() = default;
  explicit DevHistory(MetricKind kind) : kind_(kind) {}

  MetricKind kind() const { return kind_; }
  const std::vector<DevRecord>& records() const { return records_; }
  // Steps must strictly increase per pair.
  void append(DevRecord r);
  std::vector<DevRecord> for_pair(std::string_view pair) const;
  std::vector<std::string> pairs() const;  // excluding the global row

  // "step\tpair\tmetric\tckpt" with a header line.
  std::string to_tsv() const;
  static DevHistory parse_tsv(std::string_view text, MetricKind kind);

 private:
  MetricKind kind_ = MetricKind::kBleu;
  std::vector<DevRecord> records_;
};

// Per-pair argmax of the dev metric, ties to the earliest step.
std::map<std::string, DevRecord> select_checkpoints(const DevHistory& history);

// ---------------------------------------------------------------------------
// Fine-tuning

struct PairData {
  LangPair pair;
  std::vector<std::string> train_src, train_tgt;
  std::vector<std::string> dev_src, dev_tgt;
};

struct FinetuneOptions {
  fs::path ckpt_dir;      // empty: snapshots are not written
  fs::path history_path;  // empty: history kept in memory only
  fs::path log_path;
  // Stop after this many dev evaluations (0 = no limit).
  std::size_t max_evaluations = 0;
  std::function<void(std::size_t step, const StepStats&)> on_step;
};

struct FinetuneResult {
  model::Model model;  // weights after the last step
  DevHistory history;
  std::map<std::string, DevRecord> selected;
  std::size_t steps = 0;
  std::size_t evaluations = 0;
  std::vector<double> losses;
};

// Maps text to Devanagari when the task unifies scripts and the language is
// Indic; otherwise returns it unchanged.
std::string to_model_script(const translit::LanguageRegistry& registry,
                            const TaskSpec& task, std::string_view text,
                            const LangCode& lang);

// Dev metric of `model` on one pair (greedy decoding, model script).
double evaluate_pair(const model::Model& model,
                     const subword::SubwordVocab& vocab,
                     const translit::LanguageRegistry& registry,
                     const TaskSpec& task, const PairData& data);

// Trains from `init` (a pretraining checkpoint, vocab hash checked) or from
// scratch with `scratch_cfg`. Every eval_every steps each pair's dev set is
// decoded greedily; stops after `patience` evaluations without a strictly
// better global mean, or at max_steps.
FinetuneResult finetune(const TaskSpec& task, const std::vector<PairData>& data,
                        const subword::SubwordVocab& vocab,
                        const translit::LanguageRegistry& registry,
                        const std::optional<fs::path>& init,
                        const model::ModelConfig& scratch_cfg,
                        const model::TrainConfig& cfg,
                        const FinetuneOptions& opts);

// Writes a model snapshot (parameters, and Adam moments when given).
void save_snapshot(const fs::path& path, const model::Model& model,
                   const model::AdamState* adam, const model::TrainConfig& cfg,
                   const std::string& vocab_hash, std::size_t step,
                   nlohmann::json extra = nlohmann::json::object());

// Loads model weights from a checkpoint, checking the vocabulary hash.
model::Model load_model(const fs::path& path, const std::string& vocab_hash);

}  // namespace ibkt::trainer
