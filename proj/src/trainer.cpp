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

#include "ibkt/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ibkt/metrics.hpp"

namespace ibkt::trainer {

namespace {

// derive_rng stream tags
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kDropoutStream = 0x64726f70;
constexpr std::uint64_t kLangStream = 0x6c616e67;
constexpr std::uint64_t kNoiseStream = 0x6e6f6973;
constexpr std::uint64_t kEvalNoiseStream = 0x65766e73;
constexpr std::uint64_t kEpochStream = 0x65706f63;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  Rng r = derive_rng({a, b, kEpochStream});
  return r();
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

template <class T>
void shuffle_any(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(rng, i)]);
  }
}

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08zu.ckpt", step);
  return buf;
}

std::string fmt_metric(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class LogFile {
 public:
  explicit LogFile(const fs::path& path, std::string_view header) {
    if (path.empty()) return;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open log " + path.string());
    if (fresh) out_ << header << '\n';
  }
  template <class... Args>
  void row(const Args&... fields) {
    if (!out_.is_open()) return;
    bool first = true;
    ((out_ << (first ? "" : "\t") << fields, first = false), ...);
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace

// ---------------------------------------------------------------------------

Mode parse_mode(std::string_view name) {
  if (name == "pretrain") return Mode::kPretrain;
  if (name == "finetune-bi") return Mode::kFinetuneBi;
  if (name == "finetune-M2O") return Mode::kFinetuneM2O;
  if (name == "finetune-O2M") return Mode::kFinetuneO2M;
  if (name == "finetune-summarization-multi") {
    return Mode::kFinetuneSummarizationMulti;
  }
  throw Error("unknown mode '" + std::string(name) + "'");
}

std::string mode_name(Mode mode) {
  switch (mode) {
    case Mode::kPretrain: return "pretrain";
    case Mode::kFinetuneBi: return "finetune-bi";
    case Mode::kFinetuneM2O: return "finetune-M2O";
    case Mode::kFinetuneO2M: return "finetune-O2M";
    case Mode::kFinetuneSummarizationMulti: return "finetune-summarization-multi";
  }
  return "?";
}

std::string LangPair::str() const { return src.str() + "-" + tgt.str(); }

LangPair LangPair::parse(std::string_view text) {
  const auto dash = text.find('-');
  if (dash == std::string_view::npos) {
    throw Error("language pair '" + std::string(text) + "' is not src-tgt");
  }
  return {LangCode(text.substr(0, dash)), LangCode(text.substr(dash + 1))};
}

TaskSpec TaskSpec::summarization(std::vector<LangPair> pairs) {
  TaskSpec t;
  t.mode = Mode::kFinetuneSummarizationMulti;
  t.pairs = std::move(pairs);
  t.max_src_len = 512;
  t.max_tgt_len = 64;
  return t;
}

void TaskSpec::validate() const {
  const std::string m = mode_name(mode);
  if (mode == Mode::kPretrain) {
    if (languages.empty()) throw Error("pretrain task needs languages");
    if (!pairs.empty()) throw Error("pretrain task takes languages, not pairs");
    return;
  }
  if (pairs.empty()) throw Error(m + " task needs at least one pair");
  if (max_src_len < 3 || max_tgt_len < 2) {
    throw Error(m + " task length caps are too small");
  }
  switch (mode) {
    case Mode::kFinetuneBi:
      if (pairs.size() != 1) throw Error("finetune-bi takes exactly one pair");
      break;
    case Mode::kFinetuneM2O:
      for (const auto& p : pairs) {
        if (p.tgt != pairs.front().tgt) {
          throw Error("finetune-M2O pairs must share one target language");
        }
      }
      break;
    case Mode::kFinetuneO2M:
      for (const auto& p : pairs) {
        if (p.src != pairs.front().src) {
          throw Error("finetune-O2M pairs must share one source language");
        }
      }
      break;
    default:
      break;
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t j = i + 1; j < pairs.size(); ++j) {
      if (pairs[i] == pairs[j]) throw Error("duplicate pair " + pairs[i].str());
    }
  }
}

// ---------------------------------------------------------------------------

Example make_translation_example(const subword::SubwordVocab& vocab,
                                 std::string_view src, const LangCode& src_lang,
                                 std::string_view tgt, const LangCode& tgt_lang,
                                 std::size_t max_src_len,
                                 std::size_t max_tgt_len) {
  Example ex;
  ex.encoder = decode::source_ids(vocab, src, src_lang, max_src_len);
  TokenIds t = vocab.encode(tgt);
  if (t.size() + 1 > max_tgt_len) t.resize(max_tgt_len - 1);
  ex.decoder_input.push_back(vocab.lang_tag(tgt_lang));
  ex.decoder_input.insert(ex.decoder_input.end(), t.begin(), t.end());
  ex.labels = t;
  ex.labels.push_back(subword::kEosId);
  return ex;
}

std::vector<std::vector<std::size_t>> make_batches(
    std::span<const std::size_t> lengths, std::size_t tokens_per_batch,
    std::uint64_t seed) {
  if (tokens_per_batch == 0) throw Error("make_batches: zero token budget");
  Rng rng = derive_rng({seed, kShuffleStream});
  std::vector<std::size_t> idx(lengths.size());
  std::iota(idx.begin(), idx.end(), 0);
  shuffle(idx, rng);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return lengths[a] < lengths[b];
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t cur_max = 0, skipped = 0;
  for (std::size_t i : idx) {
    const std::size_t len = lengths[i];
    if (len > tokens_per_batch) {
      ++skipped;
      continue;
    }
    const std::size_t grown = std::max(cur_max, len);
    if (!cur.empty() && grown * (cur.size() + 1) > tokens_per_batch) {
      batches.push_back(std::move(cur));
      cur.clear();
      cur_max = 0;
    }
    cur.push_back(i);
    cur_max = std::max(cur_max, len);
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  if (skipped > 0) {
    spdlog::warn("skipped {} example(s) longer than the {}-token batch budget",
                 skipped, tokens_per_batch);
  }
  shuffle_any(batches, rng);
  return batches;
}

std::vector<std::vector<std::size_t>> make_batches(
    const std::vector<Example>& examples, std::size_t tokens_per_batch,
    std::uint64_t seed) {
  std::vector<std::size_t> lengths;
  lengths.reserve(examples.size());
  for (const auto& e : examples) lengths.push_back(e.length());
  return make_batches(lengths, tokens_per_batch, seed);
}

model::Batch collate(const std::vector<Example>& examples,
                     std::span<const std::size_t> indices) {
  std::vector<TokenIds> enc, dec, lab;
  for (std::size_t i : indices) {
    enc.push_back(examples[i].encoder);
    dec.push_back(examples[i].decoder_input);
    lab.push_back(examples[i].labels);
  }
  return model::make_batch(enc, dec, lab);
}

std::size_t sample_index(std::span<const double> weights, double temperature,
                         Rng& rng) {
  if (weights.empty()) throw Error("sample_index: no weights");
  if (!(temperature > 0)) throw Error("sample_index: temperature must be > 0");
  std::vector<double> w(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!(weights[i] > 0)) throw Error("sample_index: weights must be positive");
    w[i] = std::pow(weights[i], 1.0 / temperature);
    total += w[i];
  }
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return i;
  }
  return w.size() - 1;
}

LangCode sample_language(const std::vector<std::pair<LangCode, double>>& weights,
                         double temperature, Rng& rng) {
  std::vector<double> w;
  for (const auto& [_, x] : weights) w.push_back(x);
  return weights[sample_index(w, temperature, rng)].first;
}

BatchStream::BatchStream(std::vector<std::size_t> lengths,
                         std::size_t tokens_per_batch, std::uint64_t seed)
    : lengths_(std::move(lengths)),
      tokens_per_batch_(tokens_per_batch),
      seed_(seed) {
  fill();
}

void BatchStream::fill() {
  batches_ = make_batches(lengths_, tokens_per_batch_, mix(seed_, epoch_));
  if (batches_.empty()) throw Error("batch stream has no usable examples");
}

const std::vector<std::size_t>& BatchStream::next() {
  if (position_ >= batches_.size()) {
    ++epoch_;
    position_ = 0;
    fill();
  }
  return batches_[position_++];
}

void BatchStream::seek(std::size_t epoch, std::size_t position) {
  epoch_ = epoch;
  fill();
  position_ = position;
}

// ---------------------------------------------------------------------------

StepStats train_step(model::Model& model, model::AdamState& adam,
                     const model::Batch& batch, std::size_t step,
                     const model::TrainConfig& cfg) {
  StepStats s;
  s.lr = model::lr_at(step, cfg);
  Rng dropout = derive_rng({cfg.seed, kDropoutStream, step});
  const auto& params = model.parameters();
  model::zero_grads(params);
  {
    tensor::Tape<float> tape;
    auto loss = model.loss(batch, cfg.label_smoothing, true, &dropout);
    s.loss = loss.item();
    if (!std::isfinite(s.loss)) {
      throw NonFiniteLoss("non-finite training loss at step " +
                          std::to_string(step));
    }
    tape.backward(loss);
  }
  s.grad_norm = model::clip_grad_norm(params, cfg.clip_norm);
  try {
    model::adam_step(params, adam, s.lr, cfg);
  } catch (const model::NonFiniteGradient& e) {
    spdlog::warn("step {}: {}; update skipped", step, e.what());
    s.skipped = true;
  }
  model::zero_grads(params);
  return s;
}

void save_snapshot(const fs::path& path, const model::Model& model,
                   const model::AdamState* adam, const model::TrainConfig& cfg,
                   const std::string& vocab_hash, std::size_t step,
                   nlohmann::json extra) {
  model::Checkpoint c;
  c.model = model.config();
  c.train = cfg;
  c.vocab_hash = vocab_hash;
  c.step = step;
  c.tensors = model::model_tensors(model);
  if (adam != nullptr) {
    extra["adam_step"] = adam->step;
    for (auto& t : model::adam_tensors(model, *adam)) {
      c.tensors.push_back(std::move(t));
    }
  }
  c.extra = std::move(extra);
  model::save_checkpoint(path, c);
}

namespace {

void check_vocab(const model::Checkpoint& c, const std::string& vocab_hash,
                 const fs::path& path) {
  if (!vocab_hash.empty() && c.vocab_hash != vocab_hash) {
    throw Error("vocabulary hash mismatch: checkpoint " + path.string() +
                " has " + c.vocab_hash + ", vocabulary is " + vocab_hash);
  }
}

}  // namespace

model::Model load_model(const fs::path& path, const std::string& vocab_hash) {
  const auto c = model::load_checkpoint(path);
  check_vocab(c, vocab_hash, path);
  model::Model m(c.model, 0);
  model::restore_model(m, c);
  return m;
}

// ---------------------------------------------------------------------------
// Pretraining

namespace {

struct MonoSet {
  LangCode lang;
  std::vector<std::string> sentences;
  std::vector<std::size_t> lengths;  // upper bound on example length
};

std::vector<MonoSet> prepare_mono(const subword::SubwordVocab& vocab,
                                  const std::vector<subword::LangCorpus>& corpora,
                                  std::size_t cap, std::size_t& skipped) {
  std::vector<MonoSet> out;
  for (const auto& c : corpora) {
    vocab.lang_tag(c.lang);
    MonoSet m{c.lang, {}, {}};
    for (const auto& line : c.lines) {
      if (noiser::split_words(line).empty()) continue;
      const std::size_t len = vocab.encode(line).size() + 2;
      if (len > cap) {
        ++skipped;
        continue;
      }
      m.sentences.push_back(line);
      m.lengths.push_back(len);
    }
    if (m.sentences.empty()) {
      throw Error("corpus for " + c.lang.str() + " has no usable sentences");
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

PretrainResult pretrain(const subword::SubwordVocab& vocab,
                        const std::vector<subword::LangCorpus>& corpora,
                        const noiser::NoiserConfig& noise,
                        const model::ModelConfig& model_cfg,
                        const model::TrainConfig& cfg,
                        const PretrainOptions& opts) {
  cfg.validate();
  noise.validate();
  if (corpora.empty()) throw Error("pretrain: no corpora");
  PretrainResult res;
  model::ModelConfig mc = model_cfg;
  if (mc.vocab == 0) mc.vocab = vocab.size();
  if (mc.vocab != vocab.size()) {
    throw Error("model vocab " + std::to_string(mc.vocab) +
                " differs from vocabulary size " + std::to_string(vocab.size()));
  }
  const std::string vhash = vocab.hash();
  const std::size_t cap = std::min(mc.max_positions, cfg.tokens_per_batch);
  auto sets = prepare_mono(vocab, corpora, cap, res.skipped_sentences);
  if (res.skipped_sentences > 0) {
    spdlog::warn("pretrain: skipped {} sentence(s) longer than {} tokens",
                 res.skipped_sentences, cap);
  }
  std::vector<double> weights;
  std::vector<BatchStream> streams;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    weights.push_back(static_cast<double>(sets[i].sentences.size()));
    streams.emplace_back(sets[i].lengths, cfg.tokens_per_batch,
                         mix(cfg.seed, i));
  }

  res.model = model::Model(mc, cfg.seed);
  model::AdamState adam;
  std::size_t start = 0;
  if (opts.resume_from) {
    const auto c = model::load_checkpoint(*opts.resume_from);
    check_vocab(c, vhash, *opts.resume_from);
    if (!(c.model == mc)) throw Error("resume: model config differs");
    model::restore_model(res.model, c);
    model::restore_adam(res.model, c, adam);
    start = c.step;
    const auto& st = c.extra.at("streams");
    if (st.size() != streams.size()) throw Error("resume: corpus set differs");
    for (std::size_t i = 0; i < streams.size(); ++i) {
      streams[i].seek(st[i].at(0), st[i].at(1));
    }
  }

  LogFile log(opts.log_path, "step\tlang\tloss\tlr\tgrad_norm");
  auto stream_state = [&] {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : streams) st.push_back({s.epoch(), s.position()});
    return st;
  };
  for (std::size_t step = start + 1; step <= cfg.max_steps; ++step) {
    Rng lang_rng = derive_rng({cfg.seed, kLangStream, step});
    const std::size_t li = sample_index(weights, cfg.temperature, lang_rng);
    const auto idx = streams[li].next();
    Rng noise_rng = derive_rng({noise.seed, cfg.seed, kNoiseStream, step});
    std::vector<Example> examples;
    for (std::size_t i : idx) {
      auto ex = noiser::make_denoising_example(sets[li].sentences[i],
                                               sets[li].lang, noise, vocab,
                                               noise_rng);
      examples.push_back({std::move(ex.encoder), std::move(ex.decoder_input),
                          std::move(ex.labels)});
    }
    std::vector<std::size_t> all(examples.size());
    std::iota(all.begin(), all.end(), 0);
    const auto stats =
        train_step(res.model, adam, collate(examples, all), step, cfg);
    res.losses.push_back(stats.loss);
    log.row(step, sets[li].lang.str(), stats.loss, stats.lr, stats.grad_norm);
    if (opts.on_step) opts.on_step(step, stats);
    if (!opts.ckpt_dir.empty() &&
        (step % cfg.eval_every == 0 || step == cfg.max_steps)) {
      const auto path = opts.ckpt_dir / step_name(step);
      save_snapshot(path, res.model, &adam, cfg, vhash, step,
                    {{"kind", "pretrain"}, {"streams", stream_state()}});
      res.checkpoints.push_back(path);
    }
  }
  return res;
}

double denoising_loss(const model::Model& model,
                      const subword::SubwordVocab& vocab,
                      const std::vector<subword::LangCorpus>& corpora,
                      const noiser::NoiserConfig& noise, double label_smoothing,
                      std::size_t tokens_per_batch, std::uint64_t seed) {
  std::size_t skipped = 0;
  const std::size_t cap =
      std::min(model.config().max_positions, tokens_per_batch);
  const auto sets = prepare_mono(vocab, corpora, cap, skipped);
  Rng rng = derive_rng({seed, kEvalNoiseStream});
  double weighted = 0.0;
  std::size_t tokens = 0;
  for (const auto& set : sets) {
    std::vector<Example> examples;
    for (const auto& s : set.sentences) {
      auto ex = noiser::make_denoising_example(s, set.lang, noise, vocab, rng);
      examples.push_back({std::move(ex.encoder), std::move(ex.decoder_input),
                          std::move(ex.labels)});
    }
    for (const auto& b : make_batches(examples, tokens_per_batch, seed)) {
      const auto batch = collate(examples, b);
      std::size_t n = 0;
      for (auto id : batch.labels) n += id != subword::kPadId;
      const double l = model.loss(batch, label_smoothing, false, nullptr).item();
      weighted += l * static_cast<double>(n);
      tokens += n;
    }
  }
  if (tokens == 0) throw Error("denoising_loss: no tokens");
  return weighted / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Dev history

void DevHistory::append(DevRecord r) {
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->pair == r.pair) {
      if (r.step <= it->step) {
        throw Error("dev history steps must increase for " + r.pair + ": " +
                    std::to_string(r.step) + " after " +
                    std::to_string(it->step));
      }
      break;
    }
  }
  records_.push_back(std::move(r));
}

std::vector<DevRecord> DevHistory::for_pair(std::string_view pair) const {
  std::vector<DevRecord> out;
  for (const auto& r : records_) {
    if (r.pair == pair) out.push_back(r);
  }
  return out;
}

std::vector<std::string> DevHistory::pairs() const {
  std::vector<std::string> out;
  for (const auto& r : records_) {
    if (r.pair != kGlobalPair &&
        std::find(out.begin(), out.end(), r.pair) == out.end()) {
      out.push_back(r.pair);
    }
  }
  return out;
}

std::string DevHistory::to_tsv() const {
  std::string out = "step\tpair\tmetric\tckpt\n";
  for (const auto& r : records_) {
    out += std::to_string(r.step) + "\t" + r.pair + "\t" + fmt_metric(r.metric) +
           "\t" + r.ckpt + "\n";
  }
  return out;
}

DevHistory DevHistory::parse_tsv(std::string_view text, MetricKind kind) {
  DevHistory h(kind);
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.starts_with("step\t"))) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      f.push_back(line.substr(pos, tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (f.size() != 4) {
      throw FormatError("dev history line " + std::to_string(lineno) +
                        ": expected 4 fields");
    }
    DevRecord r;
    r.step = std::stoull(f[0]);
    r.pair = f[1];
    r.metric = std::stod(f[2]);
    r.ckpt = f[3];
    h.append(std::move(r));
  }
  return h;
}

std::map<std::string, DevRecord> select_checkpoints(const DevHistory& history) {
  std::map<std::string, DevRecord> best;
  for (const auto& r : history.records()) {
    if (r.pair == kGlobalPair) continue;
    auto it = best.find(r.pair);
    if (it == best.end() || r.metric > it->second.metric) best[r.pair] = r;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Fine-tuning

std::string to_model_script(const translit::LanguageRegistry& registry,
                            const TaskSpec& task, std::string_view text,
                            const LangCode& lang) {
  if (!task.unify_script || !registry.is_indic(lang)) return std::string(text);
  return registry.to_devanagari(text, lang).text;
}

double evaluate_pair(const model::Model& model,
                     const subword::SubwordVocab& vocab,
                     const translit::LanguageRegistry& registry,
                     const TaskSpec& task, const PairData& data) {
  if (data.dev_src.empty() || data.dev_src.size() != data.dev_tgt.size()) {
    throw Error("dev set for " + data.pair.str() + " is empty or misaligned");
  }
  const std::size_t src_cap = std::min(task.max_src_len, model.config().max_positions);
  std::vector<TokenIds> sources;
  std::vector<std::string> refs;
  for (std::size_t i = 0; i < data.dev_src.size(); ++i) {
    sources.push_back(decode::source_ids(
        vocab, to_model_script(registry, task, data.dev_src[i], data.pair.src),
        data.pair.src, src_cap));
    refs.push_back(to_model_script(registry, task, data.dev_tgt[i], data.pair.tgt));
  }
  decode::DecodeConfig dc;
  dc.beam = 1;
  dc.max_len = task.max_tgt_len;
  dc.target_lang = data.pair.tgt;
  std::vector<std::string> hyps;
  for (const auto& ids : decode::translate_ids(model, vocab, sources, dc)) {
    hyps.push_back(vocab.decode(ids));
  }
  if (task.mode == Mode::kFinetuneSummarizationMulti) {
    return metrics::rouge(hyps, refs).rl.f1;
  }
  return metrics::bleu(hyps, refs).score;
}

FinetuneResult finetune(const TaskSpec& task, const std::vector<PairData>& data,
                        const subword::SubwordVocab& vocab,
                        const translit::LanguageRegistry& registry,
                        const std::optional<fs::path>& init,
                        const model::ModelConfig& scratch_cfg,
                        const model::TrainConfig& cfg,
                        const FinetuneOptions& opts) {
  task.validate();
  cfg.validate();
  if (task.mode == Mode::kPretrain) throw Error("finetune: task is pretrain");
  if (data.size() != task.pairs.size()) {
    throw Error("finetune: " + std::to_string(task.pairs.size()) +
                " pairs declared, data for " + std::to_string(data.size()));
  }
  const std::string vhash = vocab.hash();
  FinetuneResult res;
  res.history = DevHistory(task.mode == Mode::kFinetuneSummarizationMulti
                               ? MetricKind::kRougeLF1
                               : MetricKind::kBleu);
  if (init) {
    res.model = load_model(*init, vhash);
  } else {
    auto mc = scratch_cfg;
    if (mc.vocab == 0) mc.vocab = vocab.size();
    res.model = model::Model(mc, cfg.seed);
  }
  if (res.model.config().vocab != vocab.size()) {
    throw Error("model vocab " + std::to_string(res.model.config().vocab) +
                " differs from vocabulary size " + std::to_string(vocab.size()));
  }
  const std::size_t src_cap =
      std::min(task.max_src_len, res.model.config().max_positions);
  const std::size_t tgt_cap =
      std::min(task.max_tgt_len, res.model.config().max_positions);

  std::vector<std::vector<Example>> examples(data.size());
  std::vector<BatchStream> streams;
  std::vector<double> weights;
  for (std::size_t p = 0; p < data.size(); ++p) {
    const auto& d = data[p];
    if (!(d.pair == task.pairs[p])) {
      throw Error("finetune: data pair " + d.pair.str() + " does not match " +
                  task.pairs[p].str());
    }
    if (d.train_src.size() != d.train_tgt.size()) {
      throw Error("finetune: " + d.pair.str() + " training sides differ: " +
                  std::to_string(d.train_src.size()) + " ≠ " +
                  std::to_string(d.train_tgt.size()));
    }
    for (std::size_t i = 0; i < d.train_src.size(); ++i) {
      if (noiser::split_words(d.train_src[i]).empty() ||
          noiser::split_words(d.train_tgt[i]).empty()) {
        continue;
      }
      examples[p].push_back(make_translation_example(
          vocab, to_model_script(registry, task, d.train_src[i], d.pair.src),
          d.pair.src, to_model_script(registry, task, d.train_tgt[i], d.pair.tgt),
          d.pair.tgt, src_cap, tgt_cap));
    }
    if (examples[p].empty()) throw Error("no training data for " + d.pair.str());
    std::vector<std::size_t> lengths;
    for (const auto& e : examples[p]) lengths.push_back(e.length());
    streams.emplace_back(std::move(lengths), cfg.tokens_per_batch,
                         mix(cfg.seed, p));
    weights.push_back(static_cast<double>(examples[p].size()));
  }

  LogFile log(opts.log_path, "step\tpair\tloss\tlr\tgrad_norm");
  std::optional<std::ofstream> hist_out;
  if (!opts.history_path.empty()) {
    if (opts.history_path.has_parent_path()) {
      fs::create_directories(opts.history_path.parent_path());
    }
    hist_out.emplace(opts.history_path, std::ios::trunc);
    *hist_out << "step\tpair\tmetric\tckpt\n";
  }
  model::AdamState adam;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    Rng pair_rng = derive_rng({cfg.seed, kLangStream, step});
    const std::size_t p = sample_index(weights, cfg.temperature, pair_rng);
    const auto idx = streams[p].next();
    const auto stats =
        train_step(res.model, adam, collate(examples[p], idx), step, cfg);
    res.losses.push_back(stats.loss);
    res.steps = step;
    log.row(step, data[p].pair.str(), stats.loss, stats.lr, stats.grad_norm);
    if (opts.on_step) opts.on_step(step, stats);

    if (step % cfg.eval_every != 0 && step != cfg.max_steps) continue;
    ++res.evaluations;
    std::string ckpt;
    if (!opts.ckpt_dir.empty()) {
      const auto path = opts.ckpt_dir / step_name(step);
      save_snapshot(path, res.model, &adam, cfg, vhash, step,
                    {{"kind", "finetune"}, {"mode", mode_name(task.mode)}});
      ckpt = path.string();
    }
    double sum = 0.0;
    std::vector<DevRecord> rows;
    for (const auto& d : data) {
      const double m = evaluate_pair(res.model, vocab, registry, task, d);
      sum += m;
      rows.push_back({step, d.pair.str(), m, ckpt});
    }
    const double global = sum / static_cast<double>(data.size());
    rows.push_back({step, std::string(kGlobalPair), global, ckpt});
    for (auto& r : rows) {
      if (hist_out) {
        *hist_out << r.step << '\t' << r.pair << '\t' << fmt_metric(r.metric)
                  << '\t' << r.ckpt << '\n';
      }
      res.history.append(std::move(r));
    }
    if (hist_out) hist_out->flush();
    spdlog::info("step {}: dev {} = {:.4f}", step,
                 res.history.kind() == MetricKind::kBleu ? "BLEU" : "ROUGE-L F1",
                 global);
    if (global > best) {
      best = global;
      bad = 0;
    } else if (++bad >= cfg.patience) {
      break;
    }
    if (opts.max_evaluations > 0 && res.evaluations >= opts.max_evaluations) {
      break;
    }
  }
  res.selected = select_checkpoints(res.history);
  return res;
}

}  // namespace ibkt::trainer
