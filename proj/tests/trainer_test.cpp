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

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "ibkt/metrics.hpp"
#include "support/synth.hpp"

namespace ibkt::trainer {
namespace {

const translit::LanguageRegistry& registry() {
  static const auto r = translit::LanguageRegistry::extended();
  return r;
}

const std::vector<LangCode>& tags() {
  static const std::vector<LangCode> t = {LangCode("hi"), LangCode("bn"),
                                          LangCode("si")};
  return t;
}

const synth::World& world() {
  static const synth::World w(registry(), 7, 120);
  return w;
}

// Unigram vocab over unified hi + bn text.
const subword::SubwordVocab& toy_vocab() {
  static const subword::SubwordVocab v = [] {
    std::vector<std::string> lines = world().mono(LangCode("hi"), 400, 1);
    for (const auto& l : world().mono(LangCode("bn"), 400, 2)) {
      lines.push_back(registry().to_devanagari(l, LangCode("bn")).text);
    }
    subword::TrainerSpec spec;
    spec.target_size = 160;
    return subword::train_unigram(lines, spec, tags());
  }();
  return v;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() /
           ("ibkt_trainer_" + name + "_" +
            std::to_string(::testing::UnitTest::GetInstance()->random_seed()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

model::ModelConfig small_model() {
  auto c = model::ModelConfig::desk(toy_vocab().size());
  c.max_positions = 64;
  return c;
}

TEST(Mode, Names) {
  for (auto m : {Mode::kPretrain, Mode::kFinetuneBi, Mode::kFinetuneM2O,
                 Mode::kFinetuneO2M, Mode::kFinetuneSummarizationMulti}) {
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  }
  EXPECT_THROW(parse_mode("finetune"), Error);
  EXPECT_EQ(LangPair::parse("bn-hi").str(), "bn-hi");
  EXPECT_THROW(LangPair::parse("bnhi"), Error);
}

TEST(TaskSpec, Validation) {
  TaskSpec t;
  t.mode = Mode::kPretrain;
  EXPECT_THROW(t.validate(), Error);
  t.languages = {LangCode("hi")};
  EXPECT_NO_THROW(t.validate());
  t.pairs = {LangPair::parse("bn-hi")};
  EXPECT_THROW(t.validate(), Error);

  TaskSpec m2o;
  m2o.mode = Mode::kFinetuneM2O;
  m2o.pairs = {LangPair::parse("bn-en"), LangPair::parse("hi-en")};
  EXPECT_NO_THROW(m2o.validate());
  m2o.pairs.push_back(LangPair::parse("en-hi"));
  EXPECT_THROW(m2o.validate(), Error);

  TaskSpec o2m;
  o2m.mode = Mode::kFinetuneO2M;
  o2m.pairs = {LangPair::parse("en-bn"), LangPair::parse("hi-en")};
  EXPECT_THROW(o2m.validate(), Error);

  TaskSpec bi;
  bi.pairs = {LangPair::parse("bn-hi"), LangPair::parse("si-hi")};
  EXPECT_THROW(bi.validate(), Error);

  const auto s = TaskSpec::summarization({LangPair::parse("hi-hi")});
  EXPECT_EQ(s.max_src_len, 512u);
  EXPECT_EQ(s.max_tgt_len, 64u);
  EXPECT_NO_THROW(s.validate());
}

TEST(Batching, TenExamplesFiftyTokens) {
  std::vector<std::size_t> lengths(10, 10);
  const auto batches = make_batches(lengths, 50, 3);
  EXPECT_GE(batches.size(), 2u);
  std::multiset<std::size_t> seen;
  for (const auto& b : batches) {
    EXPECT_LE(b.size() * 10, 50u);
    seen.insert(b.begin(), b.end());
  }
  EXPECT_EQ(seen, (std::multiset<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}));
}

TEST(Batching, SingleLongExample) {
  const std::vector<std::size_t> lengths = {100};
  const auto batches = make_batches(lengths, 4096, 0);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0], (std::vector<std::size_t>{0}));
}

TEST(Batching, DeterministicAndSeedSensitive) {
  Rng rng = derive_rng({8});
  std::vector<std::size_t> lengths;
  for (int i = 0; i < 300; ++i) lengths.push_back(1 + uniform_index(rng, 40));
  EXPECT_EQ(make_batches(lengths, 200, 5), make_batches(lengths, 200, 5));
  EXPECT_NE(make_batches(lengths, 200, 5), make_batches(lengths, 200, 6));
}

TEST(Batching, EpochCoversEachExampleOnceWithinBudget) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = derive_rng({seed, 99});
    std::vector<std::size_t> lengths;
    const std::size_t n = 1 + uniform_index(rng, 400);
    for (std::size_t i = 0; i < n; ++i) lengths.push_back(1 + uniform_index(rng, 90));
    const std::size_t budget = 64 + uniform_index(rng, 400);
    std::vector<int> count(n, 0);
    for (const auto& b : make_batches(lengths, budget, seed)) {
      std::size_t mx = 0;
      for (auto i : b) {
        ++count[i];
        mx = std::max(mx, lengths[i]);
      }
      EXPECT_LE(mx * b.size(), budget);
    }
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(count[i], lengths[i] <= budget ? 1 : 0);
    }
  }
}

TEST(Batching, OversizeSkipped) {
  const std::vector<std::size_t> lengths = {5, 500, 7};
  std::size_t total = 0;
  for (const auto& b : make_batches(lengths, 100, 1)) {
    for (auto i : b) {
      EXPECT_NE(i, 1u);
      ++total;
    }
  }
  EXPECT_EQ(total, 2u);
}

TEST(Batching, StreamWrapsEpochsAndSeeks) {
  std::vector<std::size_t> lengths(37, 4);
  BatchStream a(lengths, 40, 11), b(lengths, 40, 11);
  std::vector<std::vector<std::size_t>> seq;
  for (int i = 0; i < 13; ++i) seq.push_back(a.next());
  EXPECT_GE(a.epoch(), 1u);
  for (int i = 0; i < 7; ++i) b.next();
  BatchStream c(lengths, 40, 11);
  c.seek(b.epoch(), b.position());
  for (int i = 7; i < 13; ++i) EXPECT_EQ(c.next(), seq[i]);
}

TEST(Sampling, ProportionalMonteCarlo) {
  const std::vector<double> w = {9, 1};
  Rng rng = derive_rng({21});
  int first = 0;
  for (int i = 0; i < 10000; ++i) first += sample_index(w, 1.0, rng) == 0;
  EXPECT_NEAR(first / 10000.0, 0.9, 0.02);
}

TEST(Sampling, TemperatureFlattens) {
  const std::vector<double> w = {9, 1};
  Rng rng = derive_rng({22});
  int first = 0;
  for (int i = 0; i < 20000; ++i) first += sample_index(w, 2.0, rng) == 0;
  EXPECT_NEAR(first / 20000.0, 3.0 / 4.0, 0.015);
  first = 0;
  for (int i = 0; i < 20000; ++i) first += sample_index(w, 1e6, rng) == 0;
  EXPECT_NEAR(first / 20000.0, 0.5, 0.015);
}

TEST(Sampling, EqualWeightsUniform) {
  const std::vector<std::pair<LangCode, double>> w = {
      {LangCode("hi"), 2}, {LangCode("bn"), 2}, {LangCode("si"), 2}};
  Rng rng = derive_rng({23});
  std::map<std::string, int> c;
  for (int i = 0; i < 30000; ++i) ++c[sample_language(w, 0.7, rng).str()];
  for (const auto& [_, n] : c) EXPECT_NEAR(n / 30000.0, 1.0 / 3, 0.015);
  EXPECT_THROW(sample_index(std::vector<double>{1, 0}, 1.0, rng), Error);
}

DevHistory history_of(
    std::vector<std::tuple<std::size_t, std::string, double>> rows) {
  DevHistory h;
  for (auto& [s, p, m] : rows) h.append({s, p, m, "ckpt" + std::to_string(s)});
  return h;
}

TEST(Selection, Examples) {
  const auto h = history_of({{1000, "A", 10}, {1000, "B", 9},
                             {2000, "A", 12}, {2000, "B", 8}});
  const auto s = select_checkpoints(h);
  EXPECT_EQ(s.at("A").step, 2000u);
  EXPECT_EQ(s.at("B").step, 1000u);
  EXPECT_EQ(select_checkpoints(history_of({{5, "A", 1}})).at("A").step, 5u);
  const auto tie = select_checkpoints(
      history_of({{1000, "A", 12}, {2000, "A", 11}, {3000, "A", 12}}));
  EXPECT_EQ(tie.at("A").step, 1000u);
  EXPECT_EQ(tie.at("A").ckpt, "ckpt1000");
}

TEST(Selection, ArgmaxAndInvarianceUnderWorseAppends) {
  Rng rng = derive_rng({31});
  for (int trial = 0; trial < 100; ++trial) {
    DevHistory h;
    const std::size_t n = 1 + uniform_index(rng, 12);
    for (std::size_t i = 1; i <= n; ++i) {
      for (const char* p : {"A", "B"}) {
        h.append({i * 100, p, static_cast<double>(uniform_index(rng, 5)), ""});
      }
      h.append({i * 100, std::string(kGlobalPair), 0, ""});
    }
    const auto sel = select_checkpoints(h);
    for (const auto& pair : h.pairs()) {
      for (const auto& r : h.for_pair(pair)) {
        EXPECT_GE(sel.at(pair).metric, r.metric);
      }
    }
    DevHistory longer = h;
    for (std::size_t i = n + 1; i <= n + 4; ++i) {
      for (const char* p : {"A", "B"}) {
        longer.append({i * 100, p, sel.at(p).metric - 0.5, ""});
      }
    }
    const auto again = select_checkpoints(longer);
    for (const auto& [p, r] : sel) EXPECT_EQ(again.at(p).step, r.step);
  }
}

TEST(DevHistoryTsv, RoundTripAndOrdering) {
  auto h = history_of({{1000, "bn-hi", 12.345678901234}, {1000, "global", 1.0 / 3}});
  const auto text = h.to_tsv();
  EXPECT_TRUE(text.starts_with("step\tpair\tmetric\tckpt\n"));
  const auto back = DevHistory::parse_tsv(text, MetricKind::kBleu);
  ASSERT_EQ(back.records().size(), 2u);
  EXPECT_EQ(back.records()[0].metric, 12.345678901234);
  EXPECT_EQ(back.records()[1].metric, 1.0 / 3);
  EXPECT_EQ(back.records()[0].ckpt, "ckpt1000");
  EXPECT_THROW(h.append({1000, "bn-hi", 1, ""}), Error);
  EXPECT_THROW(DevHistory::parse_tsv("1\ta\t2\n", MetricKind::kBleu), FormatError);
}

TEST(Examples, TranslationLayout) {
  const auto& v = toy_vocab();
  const std::string s = world().render(LangCode("hi"), {1, 2, 3});
  const auto ex = make_translation_example(v, s, LangCode("bn"), s,
                                           LangCode("hi"), 64, 64);
  EXPECT_EQ(ex.encoder[ex.encoder.size() - 2], subword::kEosId);
  EXPECT_EQ(ex.encoder.back(), v.lang_tag(LangCode("bn")));
  EXPECT_EQ(ex.decoder_input.front(), v.lang_tag(LangCode("hi")));
  EXPECT_EQ(ex.labels.back(), subword::kEosId);
  EXPECT_EQ(TokenIds(ex.decoder_input.begin() + 1, ex.decoder_input.end()),
            TokenIds(ex.labels.begin(), ex.labels.end() - 1));
  const auto cut = make_translation_example(v, s, LangCode("bn"), s,
                                            LangCode("hi"), 4, 3);
  EXPECT_EQ(cut.encoder.size(), 4u);
  EXPECT_EQ(cut.decoder_input.size(), 3u);
  EXPECT_EQ(cut.labels.size(), 3u);
}

TEST(Unification, MetricsAgreeInEitherScript) {
  const LangCode bn("bn");
  const auto refs = world().mono(bn, 30, 5);
  auto hyps = world().mono(bn, 30, 6);
  for (std::size_t i = 0; i < 10; ++i) hyps[i] = refs[i];
  std::vector<std::string> ur, uh;
  for (const auto& r : refs) ur.push_back(registry().to_devanagari(r, bn).text);
  for (const auto& h : hyps) uh.push_back(registry().to_devanagari(h, bn).text);
  std::vector<std::string> back;
  for (const auto& h : uh) back.push_back(registry().from_devanagari(h, bn).text);
  EXPECT_EQ(back, hyps);
  EXPECT_DOUBLE_EQ(metrics::bleu(uh, ur).score, metrics::bleu(hyps, refs).score);
  EXPECT_DOUBLE_EQ(metrics::rouge(uh, ur).rl.f1, metrics::rouge(hyps, refs).rl.f1);
}

std::vector<subword::LangCorpus> unified_mono(std::size_t n) {
  std::vector<subword::LangCorpus> out;
  for (const char* l : {"hi", "bn"}) {
    LangCode lang(l);
    subword::LangCorpus c{lang, {}};
    for (const auto& s : world().mono(lang, n, 40)) {
      c.lines.push_back(registry().to_devanagari(s, lang).text);
    }
    out.push_back(std::move(c));
  }
  return out;
}

model::TrainConfig quick_train(std::size_t steps) {
  model::TrainConfig c;
  c.max_steps = steps;
  c.warmup = std::max<std::size_t>(1, steps / 10);
  c.tokens_per_batch = 256;
  c.eval_every = 5;
  c.seed = 3;
  return c;
}

TEST(TrainStep, Deterministic) {
  const auto corpora = unified_mono(30);
  auto run = [&] {
    return pretrain(toy_vocab(), corpora, noiser::NoiserConfig{}, small_model(),
                    quick_train(4), {})
        .losses;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.size(), 4u);
}

TEST(Pretrain, ResumeMatchesUninterrupted) {
  const auto dir = temp_dir("resume");
  const auto corpora = unified_mono(60);
  const auto tc = quick_train(20);
  PretrainOptions o;
  o.ckpt_dir = dir / "ckpt";
  o.log_path = dir / "train.tsv";
  const auto full = pretrain(toy_vocab(), corpora, noiser::NoiserConfig{},
                             small_model(), tc, o);
  ASSERT_EQ(full.losses.size(), 20u);
  ASSERT_EQ(full.checkpoints.size(), 4u);

  PretrainOptions r;
  r.resume_from = full.checkpoints[1];  // step 10
  const auto resumed = pretrain(toy_vocab(), corpora, noiser::NoiserConfig{},
                                small_model(), tc, r);
  ASSERT_EQ(resumed.losses.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(resumed.losses[i], full.losses[10 + i]) << "step " << 11 + i;
  }
  for (std::size_t i = 0; i < full.model.parameters().size(); ++i) {
    EXPECT_EQ(resumed.model.parameters()[i].tensor.values(),
              full.model.parameters()[i].tensor.values());
  }
  std::ifstream log(dir / "train.tsv");
  std::string header;
  std::getline(log, header);
  EXPECT_EQ(header, "step\tlang\tloss\tlr\tgrad_norm");
  fs::remove_all(dir);
}

TEST(Pretrain, CopyObjectiveApproachesSmoothingFloor) {
  const auto corpora = unified_mono(40);
  noiser::NoiserConfig p0;
  p0.mask_fraction = 0.0;
  auto tc = quick_train(400);
  tc.peak_lr = 2e-3;
  auto mc = small_model();
  mc.dropout = 0.0;
  const auto res = pretrain(toy_vocab(), corpora, p0, mc, tc, {});
  const double v = static_cast<double>(toy_vocab().size());
  const double eps = tc.label_smoothing;
  const double on = 1 - eps + eps / v, off = eps / v;
  const double floor = -on * std::log(on) - (v - 1) * off * std::log(off);
  for (double l : res.losses) EXPECT_GE(l, floor - 1e-4);
  const double final_loss = denoising_loss(res.model, toy_vocab(), corpora, p0,
                                           eps, 256, 1);
  EXPECT_GE(final_loss, floor - 1e-4);
  EXPECT_LT(final_loss, floor + 0.35) << "floor " << floor;
  EXPECT_LT(res.losses.back(), 0.5 * res.losses.front());
}

std::vector<PairData> copy_data(std::size_t train, std::size_t dev) {
  PairData d;
  d.pair = LangPair::parse("hi-hi");
  const auto tr = world().mono(LangCode("hi"), train, 50);
  d.train_src = tr;
  d.train_tgt = tr;
  const auto dv = world().mono(LangCode("hi"), dev, 51);
  d.dev_src = dv;
  d.dev_tgt = dv;
  return {d};
}

TEST(Finetune, PatienceOneStopsAfterTwoEvaluations) {
  TaskSpec task;
  task.pairs = {LangPair::parse("hi-hi")};
  task.max_tgt_len = 8;
  auto tc = quick_train(100);
  tc.peak_lr = 1e-30;
  tc.patience = 1;
  tc.eval_every = 3;
  const auto res = finetune(task, copy_data(20, 4), toy_vocab(), registry(),
                            std::nullopt, small_model(), tc, {});
  EXPECT_EQ(res.evaluations, 2u);
  EXPECT_EQ(res.steps, 6u);
  EXPECT_EQ(res.history.records().size(), 4u);  // pair + global, twice
  EXPECT_EQ(res.selected.at("hi-hi").step, 3u);
}

TEST(Finetune, RejectsForeignVocabulary) {
  const auto dir = temp_dir("vocab");
  model::Model m(small_model(), 1);
  save_snapshot(dir / "x.ckpt", m, nullptr, quick_train(1), "not-the-hash", 0);
  TaskSpec task;
  task.pairs = {LangPair::parse("hi-hi")};
  EXPECT_THROW(finetune(task, copy_data(5, 2), toy_vocab(), registry(),
                        dir / "x.ckpt", small_model(), quick_train(2), {}),
               Error);
  EXPECT_THROW(load_model(dir / "x.ckpt", toy_vocab().hash()), Error);
  fs::remove_all(dir);
}

TEST(Finetune, CopyTaskFromScratch) {
  const auto dir = temp_dir("copy");
  TaskSpec task;
  task.pairs = {LangPair::parse("hi-hi")};
  task.max_tgt_len = 40;
  auto tc = quick_train(3000);
  tc.tokens_per_batch = 512;
  tc.warmup = 300;
  tc.eval_every = 1000;
  tc.peak_lr = 2e-3;
  auto mc = small_model();
  mc.dropout = 0.0;
  FinetuneOptions o;
  o.ckpt_dir = dir / "ckpt";
  o.history_path = dir / "dev.tsv";
  const auto data = copy_data(2000, 100);
  const auto res = finetune(task, data, toy_vocab(), registry(), std::nullopt,
                            mc, tc, o);
  EXPECT_EQ(res.steps, 3000u);
  decode::DecodeConfig dc;
  dc.beam = 1;
  dc.max_len = 40;
  dc.target_lang = LangCode("hi");
  const auto out = decode::translate_lines(res.model, toy_vocab(),
                                           data[0].dev_src, LangCode("hi"), dc);
  std::size_t exact = 0;
  for (std::size_t i = 0; i < out.size(); ++i) exact += out[i] == data[0].dev_tgt[i];
  EXPECT_GE(exact, 90u) << "dev copies exact: " << exact << "/100";

  const auto hist = DevHistory::parse_tsv(
      [&] {
        std::ifstream in(dir / "dev.tsv");
        return std::string(std::istreambuf_iterator<char>(in), {});
      }(),
      MetricKind::kBleu);
  EXPECT_EQ(hist.to_tsv(), res.history.to_tsv());
  EXPECT_TRUE(fs::exists(res.selected.at("hi-hi").ckpt));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace ibkt::trainer
