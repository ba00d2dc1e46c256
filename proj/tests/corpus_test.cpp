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

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>

#include "support/synth.hpp"

namespace ibkt::corpus {
namespace {

class CorpusTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() /
           (std::string("ibkt_corpus_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path put(const std::string& name, const std::string& bytes) {
    const auto p = dir_ / name;
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << bytes;
    return p;
  }

  fs::path dir_;
};

TEST(Lines, Splitting) {
  EXPECT_EQ(split_lines(""), std::vector<std::string>{});
  EXPECT_EQ(split_lines("a"), std::vector<std::string>{"a"});
  EXPECT_EQ(split_lines("a\n"), std::vector<std::string>{"a"});
  EXPECT_EQ(split_lines("a\r\n\nb"), (std::vector<std::string>{"a", "", "b"}));
  EXPECT_TRUE(is_blank(" \t "));
  EXPECT_FALSE(is_blank(" x "));
}

TEST_F(CorpusTest, MonoCountsAndDropsBlanks) {
  const auto p = put("hi.txt", "एक\n\nदो\nतीन\n");
  const auto c = ingest_mono(p, LangCode("hi"));
  EXPECT_EQ(c.entry.lines, 3u);
  EXPECT_EQ(c.entry.dropped, 1u);
  EXPECT_EQ(c.entry.raw_lines(), 4u);
  EXPECT_EQ(c.lines, (std::vector<std::string>{"एक", "दो", "तीन"}));
  ASSERT_EQ(c.entry.files.size(), 1u);
  EXPECT_EQ(c.entry.files[0].bytes, fs::file_size(p));
}

TEST_F(CorpusTest, MonoHashIsSha256OfBytes) {
  const auto c = ingest_mono(put("x.txt", "abc"), LangCode("hi"));
  EXPECT_EQ(c.entry.files[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_F(CorpusTest, EmptyFile) {
  const auto c = ingest_mono(put("e.txt", ""), LangCode("hi"));
  EXPECT_EQ(c.entry.lines, 0u);
  EXPECT_EQ(c.entry.dropped, 0u);
}

TEST_F(CorpusTest, InvalidUtf8ReportsOffset) {
  const auto p = put("bad.txt", std::string("ok\nab\xC3(\n"));
  try {
    ingest_mono(p, LangCode("hi"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte 5"), std::string::npos) << e.what();
  }
}

TEST_F(CorpusTest, ParallelAligned) {
  const auto pair = trainer::LangPair::parse("bn-hi");
  const auto c = ingest_parallel(put("a.src", "1\n2\n3\n"),
                                 put("a.tgt", "x\ny\nz\n"), pair);
  EXPECT_EQ(c.entry.lines, 3u);
  EXPECT_EQ(c.src.size(), 3u);
  EXPECT_EQ(c.entry.files.size(), 2u);
}

TEST_F(CorpusTest, ParallelMismatchNamesBothCounts) {
  const auto pair = trainer::LangPair::parse("bn-hi");
  try {
    ingest_parallel(put("a.src", "1\n2\n3\n"), put("a.tgt", "w\nx\ny\nz\n"), pair);
    FAIL() << "expected Error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("3 ≠ 4"), std::string::npos) << e.what();
  }
}

TEST_F(CorpusTest, ParallelDropsPairsWithBlankSide) {
  const auto pair = trainer::LangPair::parse("bn-hi");
  const auto c = ingest_parallel(put("a.src", "1\n\n3\n4\n"),
                                 put("a.tgt", "x\ny\n \nz\n"), pair);
  EXPECT_EQ(c.src, (std::vector<std::string>{"1", "4"}));
  EXPECT_EQ(c.tgt, (std::vector<std::string>{"x", "z"}));
  EXPECT_EQ(c.entry.dropped, 2u);
}

TEST_F(CorpusTest, KeptPlusDroppedEqualsRaw) {
  Rng rng = derive_rng({77});
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    std::size_t raw = 0;
    const std::size_t n = uniform_index(rng, 30);
    for (std::size_t i = 0; i < n; ++i) {
      switch (uniform_index(rng, 3)) {
        case 0: text += "\n"; break;
        case 1: text += "  \n"; break;
        default: text += "w" + std::to_string(i) + "\n";
      }
      ++raw;
    }
    const auto c = ingest_mono(put("r.txt", text), LangCode("hi"));
    EXPECT_EQ(c.entry.raw_lines(), raw);
  }
}

TEST_F(CorpusTest, ManifestRoundTripAndMutationDetection) {
  Manifest m;
  m.add(ingest_mono(put("hi.txt", "a\nb\n"), LangCode("hi")).entry);
  auto par = ingest_parallel(put("p.src", "1\n"), put("p.tgt", "2\n"),
                             trainer::LangPair::parse("bn-hi"));
  m.add(par.entry);
  m.save(dir_ / "manifest.tsv");
  const auto back = Manifest::load(dir_ / "manifest.tsv");
  EXPECT_EQ(back.to_tsv(), m.to_tsv());
  ASSERT_EQ(back.entries().size(), 2u);
  EXPECT_EQ(back.entries()[1].files.size(), 2u);
  EXPECT_NO_THROW(back.verify());
  EXPECT_THROW(m.add(m.entries()[0]), Error);

  put("p.tgt", "3\n");  // same size, different bytes
  try {
    back.verify();
    FAIL() << "expected Error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("p.tgt"), std::string::npos);
  }
}

TEST(RunConfigParse, KeysCommentsAndErrors) {
  const auto c = RunConfig::parse(
      "# run\nseed = 5\n  pairs = bn-hi, si-hi  # two\n\nflag = yes\n", "/base");
  EXPECT_EQ(c.get_size("seed", 0), 5u);
  EXPECT_EQ(c.get_list("pairs"), (std::vector<std::string>{"bn-hi", "si-hi"}));
  EXPECT_TRUE(c.get_bool("flag", false));
  EXPECT_EQ(c.get_size("absent", 9), 9u);
  try {
    c.get("mono.hi");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("mono.hi"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("novalue\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("seed = x").get_size("seed", 0), ConfigError);

  const auto p = RunConfig::parse("mono.hi = data/hi.txt\nabs = /x/y\n", "/base");
  EXPECT_EQ(p.get_path("mono.hi"), fs::path("/base/data/hi.txt"));
  EXPECT_EQ(p.get_path("abs"), fs::path("/x/y"));
}

TEST(RunConfigParse, RunRootFromEnvironment) {
  const auto c = RunConfig::parse("run_dir = r1\n");
  ::setenv(kRunRootEnv, "/tmp/ibkt_root", 1);
  EXPECT_EQ(resolve_run_dir(c), fs::path("/tmp/ibkt_root/r1"));
  ::unsetenv(kRunRootEnv);
  EXPECT_EQ(resolve_run_dir(c), fs::current_path() / "r1");
  EXPECT_EQ(resolve_run_dir(RunConfig::parse("run_dir = /abs\n")), fs::path("/abs"));
}

const synth::World& world() {
  static const auto registry = translit::LanguageRegistry::extended();
  static const synth::World w(registry, 3, 80);
  return w;
}

class PipelineTest : public CorpusTest {
 protected:
  std::string toy_config() {
    write_lines(dir_ / "data" / "hi.txt", world().mono(LangCode("hi"), 200, 1));
    write_lines(dir_ / "data" / "bn.txt", world().mono(LangCode("bn"), 200, 2));
    for (auto [split, n, seed] : {std::tuple{"train", 300, 3}, {"dev", 20, 4}}) {
      const auto p = world().parallel(LangCode("bn"), LangCode("hi"), n, seed);
      write_lines(dir_ / "data" / (std::string("bn-hi.") + split + ".src"), p.src);
      write_lines(dir_ / "data" / (std::string("bn-hi.") + split + ".tgt"), p.tgt);
    }
    return "run_dir = " + (dir_ / "run").string() +
           "\n"
           "seed = 11\n"
           "languages = hi, bn\n"
           "mono.hi = data/hi.txt\n"
           "mono.bn = data/bn.txt\n"
           "vocab.size = 120\n"
           "model = desk\n"
           "model.max_positions = 64\n"
           "pretrain.steps = 12\n"
           "pretrain.warmup = 4\n"
           "pretrain.tokens_per_batch = 256\n"
           "pretrain.eval_every = 6\n"
           "mode = finetune-bi\n"
           "pairs = bn-hi\n"
           "train.bn-hi = data/bn-hi.train\n"
           "dev.bn-hi = data/bn-hi.dev\n"
           "finetune.steps = 10\n"
           "finetune.warmup = 2\n"
           "finetune.tokens_per_batch = 256\n"
           "finetune.eval_every = 5\n"
           "decode.max_len = 24\n";
  }
};

TEST_F(PipelineTest, EndToEndLayoutAndDeterminism) {
  const std::string text = toy_config();
  put("run.cfg", text);
  const auto cfg = RunConfig::load(dir_ / "run.cfg");
  const auto r1 = run_pipeline(cfg);
  const fs::path run = dir_ / "run";
  EXPECT_EQ(r1.run_dir, run);
  EXPECT_EQ(r1.stages, (std::vector<std::string>{"ingest", "transliterate", "vocab",
                                                 "pretrain", "finetune", "decode",
                                                 "score"}));
  for (const char* p : {"manifest.tsv", "config.txt", "vocab/vocab.tsv",
                        "ckpt/pretrain/step_00000012.ckpt",
                        "ckpt/finetune/step_00000010.ckpt", "logs/pretrain.tsv",
                        "logs/finetune.tsv", "logs/dev_history.tsv",
                        "out/bn-hi.hyp", "out/scores.tsv"}) {
    EXPECT_TRUE(fs::exists(run / p)) << p;
  }
  EXPECT_EQ(read_lines(run / "out" / "bn-hi.hyp").size(), 20u);
  ASSERT_EQ(r1.scores.count("bn-hi"), 1u);
  const auto manifest = Manifest::load(run / "manifest.tsv");
  EXPECT_NE(manifest.find("hi", "mono"), nullptr);
  EXPECT_NE(manifest.find("bn-hi:train", "parallel"), nullptr);

  const auto ckpt1 = read_file(run / "ckpt/finetune/step_00000010.ckpt");
  const auto pre1 = read_file(run / "ckpt/pretrain/step_00000012.ckpt");
  const auto scores1 = read_file(run / "out/scores.tsv");
  const auto r2 = run_pipeline(cfg);
  EXPECT_EQ(read_file(run / "ckpt/finetune/step_00000010.ckpt"), ckpt1);
  EXPECT_EQ(read_file(run / "ckpt/pretrain/step_00000012.ckpt"), pre1);
  EXPECT_EQ(read_file(run / "out/scores.tsv"), scores1);
  EXPECT_EQ(r2.scores, r1.scores);
}

TEST_F(PipelineTest, MissingCorpusKeyNamed) {
  std::string text = toy_config();
  text.erase(text.find("mono.bn"), std::string("mono.bn = data/bn.txt\n").size());
  put("run.cfg", text);
  const auto cfg = RunConfig::load(dir_ / "run.cfg");
  try {
    run_pipeline(cfg);
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "ingest");
    EXPECT_NE(std::string(e.what()).find("mono.bn"), std::string::npos) << e.what();
  }
  EXPECT_NE(pipeline(cfg), 0);
}

TEST_F(PipelineTest, StageErrorsKeepEarlierArtifacts) {
  std::string text = toy_config();
  text += "stages = vocab, decode\n";
  put("run.cfg", text);
  try {
    run_pipeline(RunConfig::load(dir_ / "run.cfg"));
    FAIL() << "expected StageError";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "decode");
  }
  EXPECT_TRUE(fs::exists(dir_ / "run" / "vocab" / "vocab.tsv"));
  EXPECT_TRUE(fs::exists(dir_ / "run" / "manifest.tsv"));
}

TEST_F(PipelineTest, UnknownStageRejected) {
  std::string text = toy_config() + "stages = vocab, backtranslate\n";
  put("run.cfg", text);
  EXPECT_THROW(run_pipeline(RunConfig::load(dir_ / "run.cfg")), StageError);
}

}  // namespace
}  // namespace ibkt::corpus
