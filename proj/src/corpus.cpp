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

#include "ibkt/corpus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "ibkt/decode.hpp"
#include "ibkt/hash.hpp"
#include "ibkt/metrics.hpp"
#include "ibkt/noiser.hpp"
#include "ibkt/utf8.hpp"

namespace ibkt::corpus {

namespace {

std::string trim(std::string_view s) {
  const auto is_ws = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n';
  };
  while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
  return std::string(s);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::size_t parse_size(std::string_view text, const std::string& what) {
  std::size_t v = 0;
  const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw FormatError(what + ": expected a count, got '" + std::string(text) + "'");
  }
  return v;
}

FileRecord record_file(const fs::path& path, const std::string& bytes) {
  return {path, bytes.size(), sha256_hex(bytes)};
}

std::string checked_text(const fs::path& path) {
  std::string text = read_file(path);
  if (const auto bad = utf8::find_invalid(text)) {
    throw FormatError(path.string() + ": invalid UTF-8 at byte " +
                      std::to_string(*bad));
  }
  return text;
}

}  // namespace

// ---------------------------------------------------------------------------
// Line files

std::vector<std::string> split_lines(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.emplace_back(line);
    start = end + 1;
  }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_lines(const fs::path& path) {
  return split_lines(read_file(path));
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

bool is_blank(std::string_view line) {
  for (char32_t c : utf8::decode(line)) {
    if (!utf8::is_space(c)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Ingestion

MonoCorpus ingest_mono(const fs::path& path, const LangCode& lang) {
  const std::string text = checked_text(path);
  MonoCorpus c;
  c.entry.name = lang.str();
  c.entry.kind = "mono";
  c.entry.files.push_back(record_file(path, text));
  for (auto& line : split_lines(text)) {
    if (is_blank(line)) {
      ++c.entry.dropped;
    } else {
      c.lines.push_back(std::move(line));
    }
  }
  c.entry.lines = c.lines.size();
  if (c.lines.empty()) spdlog::warn("{}: no sentences ({})", lang.str(), path.string());
  return c;
}

ParallelCorpus ingest_parallel(const fs::path& src, const fs::path& tgt,
                               const trainer::LangPair& pair) {
  const std::string src_text = checked_text(src);
  const std::string tgt_text = checked_text(tgt);
  auto s = split_lines(src_text);
  auto t = split_lines(tgt_text);
  if (s.size() != t.size()) {
    throw Error(pair.str() + ": line counts differ: " + std::to_string(s.size()) +
                " ≠ " + std::to_string(t.size()) + " (" + src.string() + ", " +
                tgt.string() + ")");
  }
  ParallelCorpus c;
  c.entry.name = pair.str();
  c.entry.kind = "parallel";
  c.entry.files = {record_file(src, src_text), record_file(tgt, tgt_text)};
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (is_blank(s[i]) || is_blank(t[i])) {
      ++c.entry.dropped;
      continue;
    }
    c.src.push_back(std::move(s[i]));
    c.tgt.push_back(std::move(t[i]));
  }
  c.entry.lines = c.src.size();
  if (c.src.empty()) spdlog::warn("{}: no sentence pairs", pair.str());
  return c;
}

// ---------------------------------------------------------------------------
// Manifest

void Manifest::add(ManifestEntry e) {
  if (find(e.name, e.kind)) {
    throw Error("manifest: duplicate " + e.kind + " entry " + e.name);
  }
  entries_.push_back(std::move(e));
}

const ManifestEntry* Manifest::find(std::string_view name,
                                    std::string_view kind) const {
  for (const auto& e : entries_) {
    if (e.name == name && e.kind == kind) return &e;
  }
  return nullptr;
}

std::string Manifest::to_tsv() const {
  std::ostringstream out;
  out << "name\tkind\tlines\tdropped\tpath\tbytes\tsha256\n";
  for (const auto& e : entries_) {
    for (const auto& f : e.files) {
      out << e.name << '\t' << e.kind << '\t' << e.lines << '\t' << e.dropped
          << '\t' << f.path.string() << '\t' << f.bytes << '\t' << f.sha256
          << '\n';
    }
  }
  return out.str();
}

Manifest Manifest::parse_tsv(std::string_view text) {
  const auto lines = split_lines(text);
  if (lines.empty() || !lines[0].starts_with("name\tkind\t")) {
    throw FormatError("manifest: missing header");
  }
  Manifest m;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split(lines[i], '\t');
    if (f.size() != 7) {
      throw FormatError("manifest line " + std::to_string(i + 1) +
                        ": expected 7 fields");
    }
    FileRecord rec{f[4], parse_size(f[5], "manifest bytes"), f[6]};
    if (!m.entries_.empty() && m.entries_.back().name == f[0] &&
        m.entries_.back().kind == f[1]) {
      m.entries_.back().files.push_back(std::move(rec));
      continue;
    }
    ManifestEntry e;
    e.name = f[0];
    e.kind = f[1];
    e.lines = parse_size(f[2], "manifest lines");
    e.dropped = parse_size(f[3], "manifest dropped");
    e.files.push_back(std::move(rec));
    m.add(std::move(e));
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << to_tsv();
}

Manifest Manifest::load(const fs::path& path) {
  return parse_tsv(read_file(path));
}

void Manifest::verify() const {
  for (const auto& e : entries_) {
    for (const auto& f : e.files) {
      if (!fs::exists(f.path)) {
        throw Error("corpus file disappeared since ingestion: " + f.path.string());
      }
      if (fs::file_size(f.path) != f.bytes || sha256_file(f.path) != f.sha256) {
        throw Error("corpus file changed since ingestion: " + f.path.string());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::parse(std::string_view text, fs::path base_dir) {
  RunConfig c;
  c.base_dir_ = std::move(base_dir);
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(i + 1) +
                        ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(i + 1) + ": empty key");
    }
    if (c.values_.count(key)) {
      throw ConfigError("config line " + std::to_string(i + 1) +
                        ": duplicate key '" + key + "'");
    }
    c.values_.emplace(std::move(key), std::move(value));
  }
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  return parse(read_file(path), fs::absolute(path).parent_path());
}

bool RunConfig::has(std::string_view key) const {
  return values_.count(std::string(key)) > 0;
}

std::string RunConfig::get(std::string_view key) const {
  auto it = values_.find(std::string(key));
  if (it == values_.end() || it->second.empty()) {
    throw ConfigError("missing config key '" + std::string(key) + "'");
  }
  return it->second;
}

std::string RunConfig::get_or(std::string_view key,
                              std::string_view fallback) const {
  auto it = values_.find(std::string(key));
  return it == values_.end() ? std::string(fallback) : it->second;
}

std::size_t RunConfig::get_size(std::string_view key, std::size_t fallback) const {
  if (!has(key)) return fallback;
  try {
    return parse_size(get(key), std::string(key));
  } catch (const FormatError&) {
    throw ConfigError("config key '" + std::string(key) +
                      "': expected a non-negative integer");
  }
}

double RunConfig::get_double(std::string_view key, double fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size()) {
    throw ConfigError("config key '" + std::string(key) + "': expected a number");
  }
  return d;
}

bool RunConfig::get_bool(std::string_view key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + std::string(key) + "': expected true/false");
}

std::vector<std::string> RunConfig::get_list(std::string_view key) const {
  std::vector<std::string> out;
  for (const auto& item : split(get(key), ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.push_back(t);
  }
  if (out.empty()) throw ConfigError("config key '" + std::string(key) + "' is empty");
  return out;
}

fs::path RunConfig::get_path(std::string_view key) const {
  fs::path p = get(key);
  if (p.is_relative() && !base_dir_.empty()) p = base_dir_ / p;
  return p.lexically_normal();
}

void RunConfig::set(std::string key, std::string value) {
  values_[std::move(key)] = std::move(value);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

fs::path resolve_run_dir(const RunConfig& cfg) {
  fs::path dir = cfg.get("run_dir");
  if (dir.is_absolute()) return dir;
  if (const char* root = std::getenv(kRunRootEnv); root && *root) {
    return fs::path(root) / dir;
  }
  return fs::current_path() / dir;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

const std::vector<std::string>& known_stages() {
  static const std::vector<std::string> s = {"vocab", "pretrain", "finetune",
                                             "decode", "score"};
  return s;
}

struct Context {
  Context(const RunConfig& c, translit::LanguageRegistry r, fs::path dir,
          std::uint64_t s)
      : cfg(c), registry(std::move(r)), run(std::move(dir)), seed(s) {}

  const RunConfig& cfg;
  translit::LanguageRegistry registry;
  fs::path run;
  std::uint64_t seed = 0;
  Manifest manifest;

  std::vector<LangCode> mono_langs;
  std::vector<MonoCorpus> mono;                  // native script
  std::vector<subword::LangCorpus> mono_model;   // model script
  std::optional<trainer::TaskSpec> task;
  std::vector<trainer::PairData> pairs;
  std::vector<std::vector<std::string>> test_src, test_tgt;

  fs::path vocab_path() const { return run / "vocab" / "vocab.tsv"; }
  fs::path history_path() const { return run / "logs" / "dev_history.tsv"; }
  fs::path scores_path() const { return run / "out" / "scores.tsv"; }
  fs::path hyp_path(const trainer::LangPair& p) const {
    return run / "out" / (p.str() + ".hyp");
  }

  bool summarization() const {
    return task && task->mode == trainer::Mode::kFinetuneSummarizationMulti;
  }
};

model::TrainConfig train_config(const RunConfig& cfg, const std::string& prefix,
                                model::TrainConfig base, std::uint64_t seed) {
  base.max_steps = cfg.get_size(prefix + ".steps", base.max_steps);
  base.warmup = cfg.get_size(prefix + ".warmup", base.warmup);
  base.peak_lr = cfg.get_double(prefix + ".lr", base.peak_lr);
  base.tokens_per_batch =
      cfg.get_size(prefix + ".tokens_per_batch", base.tokens_per_batch);
  base.eval_every = cfg.get_size(prefix + ".eval_every", base.eval_every);
  base.patience = cfg.get_size(prefix + ".patience", base.patience);
  base.temperature = cfg.get_double(prefix + ".temperature", base.temperature);
  base.label_smoothing =
      cfg.get_double(prefix + ".label_smoothing", base.label_smoothing);
  base.seed = seed;
  base.validate();
  return base;
}

model::ModelConfig model_config(const Context& ctx, std::size_t vocab) {
  auto m = model::ModelConfig::preset(ctx.cfg.get_or("model", "desk"), vocab);
  m.dropout = ctx.cfg.get_double("model.dropout", m.dropout);
  m.max_positions = ctx.cfg.get_size("model.max_positions", m.max_positions);
  m.validate();
  return m;
}

std::string native_output(const Context& ctx, const std::string& text,
                          const LangCode& lang) {
  if (!ctx.task->unify_script || !ctx.registry.is_indic(lang)) return text;
  return ctx.registry.from_devanagari(text, lang).text;
}

void stage_ingest(Context& ctx) {
  if (ctx.cfg.has("languages")) {
    for (const auto& l : ctx.cfg.get_list("languages")) {
      const LangCode lang = ctx.registry.parse(l);
      auto c = ingest_mono(ctx.cfg.get_path("mono." + l), lang);
      ctx.manifest.add(c.entry);
      ctx.mono_langs.push_back(lang);
      ctx.mono.push_back(std::move(c));
    }
  }
  if (ctx.cfg.has("pairs")) {
    trainer::TaskSpec task;
    const auto mode = trainer::parse_mode(ctx.cfg.get_or("mode", "finetune-bi"));
    std::vector<trainer::LangPair> pairs;
    for (const auto& p : ctx.cfg.get_list("pairs")) {
      auto lp = trainer::LangPair::parse(p);
      ctx.registry.parse(lp.src.str());
      ctx.registry.parse(lp.tgt.str());
      pairs.push_back(lp);
    }
    if (mode == trainer::Mode::kFinetuneSummarizationMulti) {
      task = trainer::TaskSpec::summarization(pairs);
    } else {
      task.pairs = pairs;
    }
    task.mode = mode;
    task.unify_script = ctx.cfg.get_bool("unify_script", true);
    task.max_src_len = ctx.cfg.get_size("max_src_len", task.max_src_len);
    task.max_tgt_len = ctx.cfg.get_size("max_tgt_len", task.max_tgt_len);
    task.validate();
    ctx.task = task;

    for (const auto& lp : pairs) {
      const std::string name = lp.str();
      const auto prefix = [&](const std::string& split) {
        return ctx.cfg.get_path(split + "." + name).string();
      };
      auto train = ingest_parallel(prefix("train") + ".src", prefix("train") + ".tgt", lp);
      auto dev = ingest_parallel(prefix("dev") + ".src", prefix("dev") + ".tgt", lp);
      const std::string test_split = ctx.cfg.has("test." + name) ? "test" : "dev";
      auto test = test_split == "dev"
                      ? dev
                      : ingest_parallel(prefix("test") + ".src",
                                        prefix("test") + ".tgt", lp);
      for (auto* part : {&train, &dev}) {
        part->entry.name = name + (part == &train ? ":train" : ":dev");
        ctx.manifest.add(part->entry);
      }
      if (test_split == "test") {
        test.entry.name = name + ":test";
        ctx.manifest.add(test.entry);
      }
      ctx.pairs.push_back({lp, std::move(train.src), std::move(train.tgt),
                           std::move(dev.src), std::move(dev.tgt)});
      ctx.test_src.push_back(std::move(test.src));
      ctx.test_tgt.push_back(std::move(test.tgt));
    }
  }
  if (ctx.mono.empty() && ctx.pairs.empty()) {
    throw ConfigError("missing config key 'languages' (or 'pairs')");
  }
  ctx.manifest.save(ctx.run / "manifest.tsv");
}

void stage_transliterate(Context& ctx) {
  const bool unify = ctx.cfg.get_bool("unify_script", true);
  ctx.mono_model.clear();
  for (std::size_t i = 0; i < ctx.mono.size(); ++i) {
    const LangCode& lang = ctx.mono_langs[i];
    subword::LangCorpus c{lang, {}};
    c.lines.reserve(ctx.mono[i].lines.size());
    std::size_t unmapped = 0;
    for (const auto& l : ctx.mono[i].lines) {
      if (unify && ctx.registry.is_indic(lang)) {
        auto r = ctx.registry.to_devanagari(l, lang);
        unmapped += r.report.chars_passed_through;
        c.lines.push_back(std::move(r.text));
      } else {
        c.lines.push_back(l);
      }
    }
    if (unmapped > 0) {
      spdlog::info("{}: {} code points outside the mapped table", lang.str(), unmapped);
    }
    ctx.mono_model.push_back(std::move(c));
  }
}

std::vector<LangCode> vocab_tags(const Context& ctx) {
  std::set<std::size_t> idx;
  for (const auto& l : ctx.mono_langs) idx.insert(ctx.registry.index_of(l));
  for (const auto& p : ctx.pairs) {
    idx.insert(ctx.registry.index_of(p.pair.src));
    idx.insert(ctx.registry.index_of(p.pair.tgt));
  }
  if (ctx.cfg.has("vocab.tags")) {
    for (const auto& l : ctx.cfg.get_list("vocab.tags")) {
      idx.insert(ctx.registry.index_of(ctx.registry.parse(l)));
    }
  }
  std::vector<LangCode> out;
  for (auto i : idx) out.push_back(ctx.registry.languages()[i]);
  return out;
}

void stage_vocab(Context& ctx) {
  if (ctx.cfg.has("vocab.path")) {
    const auto v = subword::SubwordVocab::load(ctx.cfg.get_path("vocab.path"));
    v.save(ctx.vocab_path());
    return;
  }
  std::vector<subword::LangCorpus> corpora = ctx.mono_model;
  if (corpora.empty()) {
    std::map<std::string, subword::LangCorpus> by_lang;
    trainer::TaskSpec task = *ctx.task;
    for (const auto& d : ctx.pairs) {
      for (const auto& [lang, lines] :
           {std::pair{d.pair.src, &d.train_src}, std::pair{d.pair.tgt, &d.train_tgt}}) {
        auto& c = by_lang.try_emplace(lang.str(), subword::LangCorpus{lang, {}})
                      .first->second;
        for (const auto& l : *lines) {
          c.lines.push_back(trainer::to_model_script(ctx.registry, task, l, lang));
        }
      }
    }
    for (auto& [_, c] : by_lang) corpora.push_back(std::move(c));
  }
  subword::TrainerSpec spec;
  spec.target_size = ctx.cfg.get_size("vocab.size", spec.target_size);
  spec.seed_size = ctx.cfg.get_size("vocab.seed_size", spec.seed_size);
  spec.char_coverage = ctx.cfg.get_double("vocab.char_coverage", spec.char_coverage);
  const std::size_t per_lang = ctx.cfg.get_size("vocab.sample_per_lang", 1000000);
  const auto lines = subword::sample_training_corpus(corpora, per_lang, ctx.seed);
  const auto vocab = subword::train_unigram(lines, spec, vocab_tags(ctx));
  vocab.save(ctx.vocab_path());
  spdlog::info("vocab: {} pieces, hash {}", vocab.size(), vocab.hash());
}

subword::SubwordVocab load_vocab(const Context& ctx) {
  if (!fs::exists(ctx.vocab_path())) {
    throw Error("no vocabulary at " + ctx.vocab_path().string() +
                " (run the vocab stage)");
  }
  return subword::SubwordVocab::load(ctx.vocab_path());
}

fs::path last_checkpoint(const fs::path& dir) {
  std::vector<fs::path> found;
  if (fs::exists(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".ckpt") found.push_back(e.path());
    }
  }
  if (found.empty()) throw Error("no checkpoints in " + dir.string());
  std::sort(found.begin(), found.end());
  return found.back();
}

void stage_pretrain(Context& ctx) {
  if (ctx.mono_model.empty()) throw ConfigError("missing config key 'languages'");
  const auto vocab = load_vocab(ctx);
  const auto mc = model_config(ctx, vocab.size());
  const auto tc = train_config(ctx.cfg, "pretrain", model::TrainConfig::pretrain(),
                               ctx.seed);
  noiser::NoiserConfig noise;
  noise.mask_fraction = ctx.cfg.get_double("noise.p", noise.mask_fraction);
  noise.poisson_lambda = ctx.cfg.get_double("noise.lambda", noise.poisson_lambda);
  noise.seed = ctx.seed;
  noise.validate();
  trainer::PretrainOptions opts;
  opts.ckpt_dir = ctx.run / "ckpt" / "pretrain";
  opts.log_path = ctx.run / "logs" / "pretrain.tsv";
  fs::remove_all(opts.ckpt_dir);
  fs::remove(opts.log_path);
  const auto res = trainer::pretrain(vocab, ctx.mono_model, noise, mc, tc, opts);
  if (!res.losses.empty()) {
    spdlog::info("pretrain: loss {:.4f} -> {:.4f}", res.losses.front(),
                 res.losses.back());
  }
}

void stage_finetune(Context& ctx, bool pretrained_here) {
  if (!ctx.task) throw ConfigError("missing config key 'pairs'");
  const auto vocab = load_vocab(ctx);
  std::optional<fs::path> init;
  const std::string init_key =
      ctx.cfg.get_or("finetune.init", pretrained_here ? "pretrain" : "scratch");
  if (init_key == "pretrain") {
    init = last_checkpoint(ctx.run / "ckpt" / "pretrain");
  } else if (init_key != "scratch") {
    init = ctx.cfg.get_path("finetune.init");
  }
  const auto base = ctx.summarization() ? model::TrainConfig::finetune_summarization()
                                        : model::TrainConfig::finetune_nmt();
  const auto tc = train_config(ctx.cfg, "finetune", base, ctx.seed);
  trainer::FinetuneOptions opts;
  opts.ckpt_dir = ctx.run / "ckpt" / "finetune";
  opts.history_path = ctx.history_path();
  opts.log_path = ctx.run / "logs" / "finetune.tsv";
  opts.max_evaluations = ctx.cfg.get_size("finetune.max_evaluations", 0);
  fs::remove_all(opts.ckpt_dir);
  fs::remove(opts.log_path);
  const auto res = trainer::finetune(*ctx.task, ctx.pairs, vocab, ctx.registry,
                                     init, model_config(ctx, vocab.size()), tc, opts);
  for (const auto& [pair, r] : res.selected) {
    spdlog::info("selected {} step {} (dev {:.4f})", pair, r.step, r.metric);
  }
}

decode::DecodeConfig decode_config(const Context& ctx) {
  auto d = ctx.summarization() ? decode::DecodeConfig::summarization()
                               : decode::DecodeConfig::nmt();
  d.beam = ctx.cfg.get_size("decode.beam", d.beam);
  d.length_penalty = ctx.cfg.get_double("decode.length_penalty", d.length_penalty);
  d.no_repeat_ngram = ctx.cfg.get_size("decode.no_repeat_ngram", d.no_repeat_ngram);
  d.max_len = ctx.cfg.get_size("decode.max_len", d.max_len);
  return d;
}

void stage_decode(Context& ctx) {
  if (!ctx.task) throw ConfigError("missing config key 'pairs'");
  const auto vocab = load_vocab(ctx);
  if (!fs::exists(ctx.history_path())) {
    throw Error("no dev history at " + ctx.history_path().string() +
                " (run the finetune stage)");
  }
  const auto history = trainer::DevHistory::parse_tsv(
      read_file(ctx.history_path()),
      ctx.summarization() ? trainer::MetricKind::kRougeLF1
                          : trainer::MetricKind::kBleu);
  const auto selected = trainer::select_checkpoints(history);
  const bool emit_native = ctx.cfg.get_bool("emit_native", true);
  for (std::size_t p = 0; p < ctx.pairs.size(); ++p) {
    const auto& pair = ctx.pairs[p].pair;
    auto it = selected.find(pair.str());
    if (it == selected.end() || it->second.ckpt.empty()) {
      throw Error("no selected checkpoint for " + pair.str());
    }
    const auto model = trainer::load_model(it->second.ckpt, vocab.hash());
    auto dc = decode_config(ctx);
    dc.target_lang = pair.tgt;
    std::vector<std::string> src;
    for (const auto& s : ctx.test_src[p]) {
      src.push_back(trainer::to_model_script(ctx.registry, *ctx.task, s, pair.src));
    }
    auto out = decode::translate_lines(model, vocab, src, pair.src, dc);
    if (emit_native) {
      for (auto& o : out) o = native_output(ctx, o, pair.tgt);
    }
    write_lines(ctx.hyp_path(pair), out);
  }
}

void stage_score(Context& ctx, PipelineResult& result) {
  if (!ctx.task) throw ConfigError("missing config key 'pairs'");
  std::ostringstream out;
  out << "pair\t"
      << (ctx.summarization() ? metrics::RougeReport::tsv_header()
                              : metrics::BleuReport::tsv_header())
      << '\n';
  for (std::size_t p = 0; p < ctx.pairs.size(); ++p) {
    const auto& pair = ctx.pairs[p].pair;
    const auto hyp_path = ctx.hyp_path(pair);
    if (!fs::exists(hyp_path)) {
      throw Error("no outputs at " + hyp_path.string() + " (run the decode stage)");
    }
    std::vector<std::string> hyps, refs;
    for (const auto& h : read_lines(hyp_path)) {
      hyps.push_back(trainer::to_model_script(ctx.registry, *ctx.task, h, pair.tgt));
    }
    for (const auto& r : ctx.test_tgt[p]) {
      refs.push_back(trainer::to_model_script(ctx.registry, *ctx.task, r, pair.tgt));
    }
    if (hyps.size() != refs.size()) {
      throw Error(pair.str() + ": " + std::to_string(hyps.size()) +
                  " outputs for " + std::to_string(refs.size()) + " references");
    }
    if (ctx.summarization()) {
      const auto r = metrics::rouge(hyps, refs);
      out << pair.str() << '\t' << r.tsv() << '\n';
      result.scores[pair.str()] = r.rl.f1;
    } else {
      const auto b = metrics::bleu(hyps, refs);
      out << pair.str() << '\t' << b.tsv() << '\n';
      result.scores[pair.str()] = b.score;
    }
  }
  const auto path = ctx.scores_path();
  fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << out.str();
  if (!f) throw Error("cannot write " + path.string());
}

template <class F>
void run_stage(const std::string& name, Context& ctx, PipelineResult& result,
               F&& body) {
  spdlog::info("stage {}", name);
  try {
    if (name != "ingest") ctx.manifest.verify();
    body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
  result.stages.push_back(name);
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& cfg) {
  PipelineResult result;
  std::vector<std::string> stages;
  std::optional<Context> ctx_storage;
  try {
    stages = cfg.has("stages") ? cfg.get_list("stages") : known_stages();
    for (const auto& s : stages) {
      if (std::find(known_stages().begin(), known_stages().end(), s) ==
          known_stages().end()) {
        throw ConfigError("config key 'stages': unknown stage '" + s + "'");
      }
    }
    result.run_dir = resolve_run_dir(cfg);
    const fs::path data_dir = cfg.has("translit.data_dir")
                                  ? cfg.get_path("translit.data_dir")
                                  : translit::default_data_dir();
    ctx_storage.emplace(cfg, translit::LanguageRegistry::extended(data_dir),
                        result.run_dir, cfg.get_size("seed", 0));
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  Context& ctx = *ctx_storage;
  const auto wants = [&](const char* s) {
    return std::find(stages.begin(), stages.end(), s) != stages.end();
  };

  for (const char* d : {"vocab", "ckpt", "logs", "out"}) {
    fs::create_directories(ctx.run / d);
  }
  {
    RunConfig resolved = cfg;
    resolved.set("seed", std::to_string(ctx.seed));
    resolved.set("run_dir", ctx.run.string());
    std::ofstream(ctx.run / "config.txt", std::ios::trunc) << resolved.to_text();
  }

  run_stage("ingest", ctx, result, [&] { stage_ingest(ctx); });
  run_stage("transliterate", ctx, result, [&] { stage_transliterate(ctx); });
  if (wants("vocab")) run_stage("vocab", ctx, result, [&] { stage_vocab(ctx); });
  if (wants("pretrain")) run_stage("pretrain", ctx, result, [&] { stage_pretrain(ctx); });
  if (wants("finetune")) {
    run_stage("finetune", ctx, result,
              [&] { stage_finetune(ctx, wants("pretrain")); });
  }
  if (wants("decode")) run_stage("decode", ctx, result, [&] { stage_decode(ctx); });
  if (wants("score")) {
    run_stage("score", ctx, result, [&] { stage_score(ctx, result); });
  }
  return result;
}

int pipeline(const RunConfig& cfg) {
  try {
    const auto r = run_pipeline(cfg);
    for (const auto& [pair, score] : r.scores) {
      spdlog::info("{}: {:.4f}", pair, score);
    }
    spdlog::info("run directory {}", r.run_dir.string());
    return 0;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

}  // namespace ibkt::corpus
