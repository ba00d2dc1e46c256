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

// ibkt: command-line entry point.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ibkt/corpus.hpp"
#include "ibkt/decode.hpp"
#include "ibkt/metrics.hpp"
#include "ibkt/noiser.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/trainer.hpp"
#include "ibkt/translit.hpp"
#include "ibkt/utf8.hpp"

namespace {

using namespace ibkt;
namespace fs = std::filesystem;

std::vector<std::string> stdin_lines() {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

void print_lines(const std::vector<std::string>& lines) {
  for (const auto& l : lines) std::cout << l << '\n';
}

std::pair<std::string, std::string> split_kv(const std::string& s,
                                             const std::string& flag) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size()) {
    throw Error(flag + " expects KEY=VALUE, got '" + s + "'");
  }
  return {s.substr(0, eq), s.substr(eq + 1)};
}

struct Common {
  std::uint64_t seed = 0;
  std::string data_dir;

  translit::LanguageRegistry registry() const {
    return data_dir.empty() ? translit::LanguageRegistry::extended()
                            : translit::LanguageRegistry::extended(data_dir);
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--translit-data", c.data_dir,
                  "Directory with the Sinhala pair table");
}

std::string to_model(const translit::LanguageRegistry& reg, bool unify,
                     const std::string& text, const LangCode& lang) {
  if (!unify || !reg.is_indic(lang)) return text;
  return reg.to_devanagari(text, lang).text;
}

std::string to_native(const translit::LanguageRegistry& reg, bool unify,
                      const std::string& text, const LangCode& lang) {
  if (!unify || !reg.is_indic(lang)) return text;
  return reg.from_devanagari(text, lang).text;
}

// --- translit -------------------------------------------------------------

struct TranslitArgs {
  Common common;
  std::string src;
  bool to_deva = false, from_deva = false, report = false;
};

int run_translit(const TranslitArgs& a) {
  const auto reg = a.common.registry();
  const LangCode lang = reg.parse(a.src);
  translit::TranslitReport total;
  for (const auto& line : stdin_lines()) {
    auto r = a.to_deva ? reg.to_devanagari(line, lang) : reg.from_devanagari(line, lang);
    std::cout << r.text << '\n';
    total.merge(r.report);
  }
  if (a.report) {
    std::cerr << "chars\t" << total.chars_total << "\nmapped\t" << total.chars_mapped
              << "\npassed_through\t" << total.chars_passed_through << '\n';
    for (const auto& [cp, n] : total.passthrough_inventory) {
      std::cerr << utf8::format_codepoint(cp) << '\t' << n << '\n';
    }
  }
  return 0;
}

// --- subword --------------------------------------------------------------

struct SpmTrainArgs {
  Common common;
  std::vector<std::string> inputs;  // lang=path
  std::vector<std::string> tags;
  std::string output;
  std::size_t size = 512;
  std::size_t per_lang = 1000000;
  double coverage = 0.9995;
  bool no_unify = false;
};

int run_spm_train(const SpmTrainArgs& a) {
  const auto reg = a.common.registry();
  std::vector<subword::LangCorpus> corpora;
  std::vector<LangCode> tags;
  for (const auto& in : a.inputs) {
    const auto [l, path] = split_kv(in, "--input");
    const LangCode lang = reg.parse(l);
    auto c = corpus::ingest_mono(path, lang);
    subword::LangCorpus lc{lang, {}};
    for (const auto& s : c.lines) lc.lines.push_back(to_model(reg, !a.no_unify, s, lang));
    corpora.push_back(std::move(lc));
    tags.push_back(lang);
  }
  for (const auto& t : a.tags) tags.push_back(reg.parse(t));
  std::sort(tags.begin(), tags.end(), [&](const LangCode& x, const LangCode& y) {
    return reg.index_of(x) < reg.index_of(y);
  });
  tags.erase(std::unique(tags.begin(), tags.end()), tags.end());
  subword::TrainerSpec spec;
  spec.target_size = a.size;
  spec.char_coverage = a.coverage;
  const auto lines = subword::sample_training_corpus(corpora, a.per_lang, a.common.seed);
  const auto vocab = subword::train_unigram(lines, spec, tags);
  vocab.save(a.output);
  spdlog::info("wrote {} pieces to {} (hash {})", vocab.size(), a.output, vocab.hash());
  return 0;
}

struct SpmCodecArgs {
  Common common;
  std::string vocab;
  bool ids = false;
};

int run_spm_encode(const SpmCodecArgs& a) {
  const auto vocab = subword::SubwordVocab::load(a.vocab);
  for (const auto& line : stdin_lines()) {
    const auto seg = vocab.segment(line);
    std::string out;
    for (std::size_t i = 0; i < seg.ids.size(); ++i) {
      if (i) out += ' ';
      out += a.ids ? std::to_string(seg.ids[i]) : vocab.piece(seg.ids[i]);
    }
    std::cout << out << '\n';
  }
  return 0;
}

int run_spm_decode(const SpmCodecArgs& a) {
  const auto vocab = subword::SubwordVocab::load(a.vocab);
  for (const auto& line : stdin_lines()) {
    subword::TokenIds ids;
    for (const auto& tok : noiser::split_words(line)) {
      if (a.ids) {
        ids.push_back(static_cast<subword::TokenId>(std::stol(tok)));
      } else {
        const auto id = vocab.find(tok);
        ids.push_back(id ? *id : subword::kUnkId);
      }
    }
    std::cout << vocab.decode(ids) << '\n';
  }
  return 0;
}

// --- noise-preview ----------------------------------------------------------

struct NoiseArgs {
  Common common;
  double p = 0.35, lambda = 3.5;
};

int run_noise_preview(const NoiseArgs& a) {
  noiser::NoiserConfig cfg;
  cfg.mask_fraction = a.p;
  cfg.poisson_lambda = a.lambda;
  cfg.seed = a.common.seed;
  cfg.validate();
  std::uint64_t index = 0;
  for (const auto& line : stdin_lines()) {
    Rng rng = derive_rng({cfg.seed, index++});
    const auto n = noiser::noise(noiser::split_words(line), cfg, rng);
    std::string src, tgt;
    for (const auto& w : n.source_words) src += (src.empty() ? "" : " ") + w;
    for (const auto& w : n.target_words) tgt += (tgt.empty() ? "" : " ") + w;
    std::cout << src << '\t' << tgt << '\n';
  }
  return 0;
}

// --- training -------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string vocab, model = "desk", ckpt_dir, log;
  std::size_t steps = 0, warmup = 0, tokens = 0, eval_every = 0, patience = 0;
  double lr = 0.0, temperature = 0.0;
  bool no_unify = false;

  void apply(model::TrainConfig& c) const {
    if (steps) c.max_steps = steps;
    if (warmup) c.warmup = warmup;
    if (tokens) c.tokens_per_batch = tokens;
    if (eval_every) c.eval_every = eval_every;
    if (patience) c.patience = patience;
    if (lr > 0) c.peak_lr = lr;
    if (temperature > 0) c.temperature = temperature;
    c.seed = common.seed;
    c.validate();
  }
};

void add_train_options(CLI::App* cmd, TrainArgs& a) {
  add_common(cmd, a.common);
  cmd->add_option("--vocab", a.vocab, "Vocabulary TSV")->required();
  cmd->add_option("--model", a.model, "Model preset: full, scratch, desk");
  cmd->add_option("--steps", a.steps, "Maximum optimizer steps");
  cmd->add_option("--warmup", a.warmup, "Warmup steps");
  cmd->add_option("--tokens-per-batch", a.tokens, "Token budget per batch");
  cmd->add_option("--eval-every", a.eval_every, "Checkpoint/evaluation interval");
  cmd->add_option("--patience", a.patience, "Evaluations without improvement");
  cmd->add_option("--lr", a.lr, "Peak learning rate");
  cmd->add_option("--temperature", a.temperature, "Language sampling temperature");
  cmd->add_option("--ckpt-dir", a.ckpt_dir, "Checkpoint directory");
  cmd->add_option("--log", a.log, "Per-step TSV log");
  cmd->add_flag("--no-unify", a.no_unify, "Keep native scripts");
}

struct PretrainArgs {
  TrainArgs t;
  std::vector<std::string> mono;  // lang=path
  double p = 0.35, lambda = 3.5;
  std::string resume;
};

int run_pretrain(const PretrainArgs& a) {
  const auto reg = a.t.common.registry();
  const auto vocab = subword::SubwordVocab::load(a.t.vocab);
  std::vector<subword::LangCorpus> corpora;
  for (const auto& m : a.mono) {
    const auto [l, path] = split_kv(m, "--mono");
    const LangCode lang = reg.parse(l);
    subword::LangCorpus c{lang, {}};
    for (const auto& s : corpus::ingest_mono(path, lang).lines) {
      c.lines.push_back(to_model(reg, !a.t.no_unify, s, lang));
    }
    corpora.push_back(std::move(c));
  }
  auto tc = model::TrainConfig::pretrain();
  a.t.apply(tc);
  noiser::NoiserConfig noise;
  noise.mask_fraction = a.p;
  noise.poisson_lambda = a.lambda;
  noise.seed = a.t.common.seed;
  trainer::PretrainOptions opts;
  opts.ckpt_dir = a.t.ckpt_dir;
  opts.log_path = a.t.log;
  if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
  const auto res = trainer::pretrain(vocab, corpora, noise,
                                     model::ModelConfig::preset(a.t.model, vocab.size()),
                                     tc, opts);
  if (!res.losses.empty()) {
    spdlog::info("loss {:.4f} -> {:.4f} over {} steps", res.losses.front(),
                 res.losses.back(), res.losses.size());
  }
  for (const auto& c : res.checkpoints) std::cout << c.string() << '\n';
  return 0;
}

struct FinetuneArgs {
  TrainArgs t;
  std::string mode = "finetune-bi", init, history;
  std::vector<std::string> pairs, train, dev;  // train/dev: pair=prefix
};

int run_finetune(const FinetuneArgs& a) {
  const auto reg = a.t.common.registry();
  const auto vocab = subword::SubwordVocab::load(a.t.vocab);
  const auto mode = trainer::parse_mode(a.mode);
  std::vector<trainer::LangPair> pairs;
  for (const auto& p : a.pairs) pairs.push_back(trainer::LangPair::parse(p));
  trainer::TaskSpec task = mode == trainer::Mode::kFinetuneSummarizationMulti
                               ? trainer::TaskSpec::summarization(pairs)
                               : trainer::TaskSpec{};
  task.mode = mode;
  task.pairs = pairs;
  task.unify_script = !a.t.no_unify;
  task.validate();
  std::map<std::string, std::string> train, dev;
  for (const auto& s : a.train) train.insert(split_kv(s, "--train"));
  for (const auto& s : a.dev) dev.insert(split_kv(s, "--dev"));
  std::vector<trainer::PairData> data;
  for (const auto& lp : pairs) {
    const auto name = lp.str();
    if (!train.count(name)) throw Error("missing --train " + name + "=PREFIX");
    if (!dev.count(name)) throw Error("missing --dev " + name + "=PREFIX");
    auto tr = corpus::ingest_parallel(train[name] + ".src", train[name] + ".tgt", lp);
    auto dv = corpus::ingest_parallel(dev[name] + ".src", dev[name] + ".tgt", lp);
    data.push_back({lp, std::move(tr.src), std::move(tr.tgt), std::move(dv.src),
                    std::move(dv.tgt)});
  }
  auto tc = mode == trainer::Mode::kFinetuneSummarizationMulti
                ? model::TrainConfig::finetune_summarization()
                : model::TrainConfig::finetune_nmt();
  a.t.apply(tc);
  trainer::FinetuneOptions opts;
  opts.ckpt_dir = a.t.ckpt_dir;
  opts.history_path = a.history;
  opts.log_path = a.t.log;
  std::optional<fs::path> init;
  if (!a.init.empty()) init = fs::path(a.init);
  const auto res = trainer::finetune(task, data, vocab, reg, init,
                                     model::ModelConfig::preset(a.t.model, vocab.size()),
                                     tc, opts);
  for (const auto& [pair, r] : res.selected) {
    std::cout << pair << '\t' << r.step << '\t' << r.metric << '\t' << r.ckpt << '\n';
  }
  return 0;
}

// --- generation -----------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string ckpt, vocab, src_lang, tgt_lang;
  std::size_t beam = 0, no_repeat = 0, max_len = 0;
  double length_penalty = -1.0;
  bool emit_native = false, no_unify = false;
};

void add_generate_options(CLI::App* cmd, GenerateArgs& a,
                          const decode::DecodeConfig& preset) {
  add_common(cmd, a.common);
  a.beam = preset.beam;
  a.length_penalty = preset.length_penalty;
  a.no_repeat = preset.no_repeat_ngram;
  a.max_len = preset.max_len;
  cmd->add_option("--ckpt", a.ckpt, "Model checkpoint")->required();
  cmd->add_option("--vocab", a.vocab, "Vocabulary TSV")->required();
  cmd->add_option("--src-lang", a.src_lang, "Source language")->required();
  cmd->add_option("--tgt-lang", a.tgt_lang, "Target language")->required();
  cmd->add_option("--beam", a.beam, "Beam size (1 = greedy)");
  cmd->add_option("--length-penalty", a.length_penalty, "Length penalty alpha");
  cmd->add_option("--no-repeat-ngram", a.no_repeat, "Block repeated n-grams (0 = off)");
  cmd->add_option("--max-len", a.max_len, "Maximum output tokens");
  cmd->add_flag("--emit-native", a.emit_native,
                "Map outputs from Devanagari to the target script");
  cmd->add_flag("--no-unify", a.no_unify, "Inputs are already in the model script");
}

int run_generate(const GenerateArgs& a) {
  const auto reg = a.common.registry();
  const auto vocab = subword::SubwordVocab::load(a.vocab);
  const auto model = trainer::load_model(a.ckpt, vocab.hash());
  const LangCode src = reg.parse(a.src_lang), tgt = reg.parse(a.tgt_lang);
  decode::DecodeConfig dc;
  dc.beam = a.beam;
  dc.length_penalty = a.length_penalty;
  dc.no_repeat_ngram = a.no_repeat;
  dc.max_len = a.max_len;
  dc.target_lang = tgt;
  std::vector<std::string> lines;
  for (const auto& l : stdin_lines()) lines.push_back(to_model(reg, !a.no_unify, l, src));
  auto out = decode::translate_lines(model, vocab, lines, src, dc);
  if (a.emit_native) {
    for (auto& o : out) o = to_native(reg, true, o, tgt);
  }
  print_lines(out);
  return 0;
}

// --- scoring --------------------------------------------------------------

struct ScoreArgs {
  Common common;
  std::string hyps, refs, to_deva;
  bool header = false;
};

std::pair<std::vector<std::string>, std::vector<std::string>> score_inputs(
    const ScoreArgs& a) {
  auto hyps = corpus::read_lines(a.hyps);
  auto refs = corpus::read_lines(a.refs);
  if (!a.to_deva.empty()) {
    const auto reg = a.common.registry();
    const LangCode lang = reg.parse(a.to_deva);
    for (auto& h : hyps) h = reg.to_devanagari(h, lang).text;
    for (auto& r : refs) r = reg.to_devanagari(r, lang).text;
  }
  return {std::move(hyps), std::move(refs)};
}

void add_score_options(CLI::App* cmd, ScoreArgs& a) {
  add_common(cmd, a.common);
  cmd->add_option("hyps", a.hyps, "Hypothesis lines")->required();
  cmd->add_option("refs", a.refs, "Reference lines")->required();
  cmd->add_option("--to-devanagari", a.to_deva,
                  "Map both sides from LANG's script to Devanagari first");
  cmd->add_flag("--header", a.header, "Print the field names first");
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("ibkt"));

  CLI::App app{"Indic multilingual seq2seq toolkit"};
  app.require_subcommand(1);

  TranslitArgs tl;
  auto* c_tl = app.add_subcommand("translit", "Map text to or from Devanagari");
  add_common(c_tl, tl.common);
  c_tl->add_option("--src", tl.src, "Language code of the native script")->required();
  auto* to = c_tl->add_flag("--to-deva", tl.to_deva, "Native script to Devanagari");
  auto* from = c_tl->add_flag("--from-deva", tl.from_deva, "Devanagari to native script");
  to->excludes(from);
  c_tl->add_flag("--report", tl.report, "Coverage report on stderr");

  SpmTrainArgs st;
  auto* c_st = app.add_subcommand("spm-train", "Train a unigram subword vocabulary");
  add_common(c_st, st.common);
  c_st->add_option("--input", st.inputs, "LANG=PATH monolingual file")->required();
  c_st->add_option("--size", st.size, "Vocabulary size including specials");
  c_st->add_option("--per-lang", st.per_lang, "Sampled sentences per language");
  c_st->add_option("--coverage", st.coverage, "Character coverage");
  c_st->add_option("--tags", st.tags, "Extra language tags");
  c_st->add_option("--output,-o", st.output, "Vocabulary TSV")->required();
  c_st->add_flag("--no-unify", st.no_unify, "Keep native scripts");

  SpmCodecArgs se, sd;
  auto* c_se = app.add_subcommand("spm-encode", "Segment stdin lines");
  add_common(c_se, se.common);
  c_se->add_option("--vocab", se.vocab, "Vocabulary TSV")->required();
  c_se->add_flag("--ids", se.ids, "Print ids instead of pieces");
  auto* c_sd = app.add_subcommand("spm-decode", "Join pieces or ids back into text");
  add_common(c_sd, sd.common);
  c_sd->add_option("--vocab", sd.vocab, "Vocabulary TSV")->required();
  c_sd->add_flag("--ids", sd.ids, "Input lines hold ids");

  NoiseArgs np;
  auto* c_np = app.add_subcommand("noise-preview", "Show span-masked inputs");
  add_common(c_np, np.common);
  c_np->add_option("--p", np.p, "Masked word fraction");
  c_np->add_option("--lambda", np.lambda, "Poisson span length mean");

  PretrainArgs pt;
  auto* c_pt = app.add_subcommand("pretrain", "Denoising pretraining");
  add_train_options(c_pt, pt.t);
  c_pt->add_option("--mono", pt.mono, "LANG=PATH monolingual file")->required();
  c_pt->add_option("--p", pt.p, "Masked word fraction");
  c_pt->add_option("--lambda", pt.lambda, "Poisson span length mean");
  c_pt->add_option("--resume", pt.resume, "Resume from a pretraining checkpoint");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune on parallel data");
  add_train_options(c_ft, ft.t);
  c_ft->add_option("--mode", ft.mode,
                   "finetune-bi, finetune-M2O, finetune-O2M, "
                   "finetune-summarization-multi");
  c_ft->add_option("--pair", ft.pairs, "Language pair, e.g. bn-hi")->required();
  c_ft->add_option("--train", ft.train, "PAIR=PREFIX (PREFIX.src / PREFIX.tgt)")
      ->required();
  c_ft->add_option("--dev", ft.dev, "PAIR=PREFIX")->required();
  c_ft->add_option("--init", ft.init, "Pretrained checkpoint (default: scratch)");
  c_ft->add_option("--history", ft.history, "Dev history TSV");

  GenerateArgs tr, sm;
  auto* c_tr = app.add_subcommand("translate", "Translate stdin lines");
  add_generate_options(c_tr, tr, decode::DecodeConfig::nmt());
  auto* c_sm = app.add_subcommand("summarize", "Summarize stdin lines");
  add_generate_options(c_sm, sm, decode::DecodeConfig::summarization());

  ScoreArgs sb, sr;
  auto* c_sb = app.add_subcommand("score-bleu", "Corpus BLEU (13a tokens)");
  add_score_options(c_sb, sb);
  auto* c_sr = app.add_subcommand("score-rouge", "ROUGE-1/2/L F1");
  add_score_options(c_sr, sr);

  std::string config_path;
  Common pl;
  auto* c_pl = app.add_subcommand("pipeline", "Run a staged experiment from a config");
  add_common(c_pl, pl);
  c_pl->add_option("config", config_path, "key = value run config")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*c_tl) {
      if (!tl.to_deva && !tl.from_deva) throw Error("give --to-deva or --from-deva");
      return run_translit(tl);
    }
    if (*c_st) return run_spm_train(st);
    if (*c_se) return run_spm_encode(se);
    if (*c_sd) return run_spm_decode(sd);
    if (*c_np) return run_noise_preview(np);
    if (*c_pt) return run_pretrain(pt);
    if (*c_ft) return run_finetune(ft);
    if (*c_tr) return run_generate(tr);
    if (*c_sm) return run_generate(sm);
    if (*c_sb) {
      const auto [h, r] = score_inputs(sb);
      const auto rep = metrics::bleu(h, r);
      if (sb.header) std::cout << metrics::BleuReport::tsv_header() << '\n';
      std::cout << rep.tsv() << '\n';
      return 0;
    }
    if (*c_sr) {
      const auto [h, r] = score_inputs(sr);
      const auto rep = metrics::rouge(h, r);
      if (sr.header) std::cout << metrics::RougeReport::tsv_header() << '\n';
      std::cout << rep.tsv() << '\n';
      return 0;
    }
    if (*c_pl) {
      auto cfg = corpus::RunConfig::load(config_path);
      if (c_pl->count("--seed")) cfg.set("seed", std::to_string(pl.seed));
      if (!pl.data_dir.empty()) cfg.set("translit.data_dir", pl.data_dir);
      return corpus::pipeline(cfg);
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
