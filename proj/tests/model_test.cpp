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

#include "ibkt/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace ibkt::model {
namespace {

namespace fs = std::filesystem;
using tensor::Tape;

ModelConfig tiny_config(std::size_t vocab = 24) {
  ModelConfig c = ModelConfig::desk(vocab);
  c.layers = 1;
  c.d_model = 16;
  c.d_ff = 32;
  c.heads = 2;
  c.max_positions = 16;
  return c;
}

TokenMatrix matrix(std::vector<TokenIds> rows, std::size_t min_cols = 0) {
  return pad_sequences(rows, min_cols);
}

template <class T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return d;
}

// Logits of row r, position t.
std::vector<float> logits_at(const Model::Tensor& logits, std::size_t r,
                             std::size_t t) {
  const std::size_t td = logits.dim(1), v = logits.dim(2);
  const auto* p = logits.data() + (r * td + t) * v;
  return {p, p + v};
}

TEST(ModelConfig, Presets) {
  const auto p = ModelConfig::full(1000);
  EXPECT_EQ(p.layers, 6u);
  EXPECT_EQ(p.d_model, 1024u);
  EXPECT_EQ(p.d_ff, 4096u);
  EXPECT_EQ(p.heads, 16u);
  EXPECT_DOUBLE_EQ(p.dropout, 0.1);
  const auto s = ModelConfig::scratch(1000);
  EXPECT_EQ(s.d_model, 512u);
  EXPECT_EQ(s.d_ff, 2048u);
  const auto d = ModelConfig::desk(1000);
  EXPECT_EQ(d.layers, 2u);
  EXPECT_EQ(d.d_model, 64u);
  EXPECT_EQ(d.d_ff, 256u);
  EXPECT_EQ(d.heads, 4u);
  EXPECT_EQ(ModelConfig::preset("desk", 7), ModelConfig::desk(7));
  EXPECT_THROW(ModelConfig::preset("huge", 7), Error);

  auto bad = d;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_EQ(ModelConfig::from_json(p.to_json()), p);
}

TEST(TrainConfig, Presets) {
  const auto p = TrainConfig::pretrain();
  EXPECT_DOUBLE_EQ(p.peak_lr, 0.001);
  EXPECT_EQ(p.warmup, 16000u);
  EXPECT_DOUBLE_EQ(p.weight_decay, 1e-5);
  EXPECT_DOUBLE_EQ(p.label_smoothing, 0.1);
  EXPECT_EQ(p.tokens_per_batch, 4096u);
  EXPECT_EQ(p.max_steps, 750000u);
  const auto n = TrainConfig::finetune_nmt();
  EXPECT_EQ(n.tokens_per_batch, 2048u);
  EXPECT_EQ(n.warmup, 16000u);
  EXPECT_EQ(TrainConfig::finetune_summarization().warmup, 4000u);
  EXPECT_EQ(TrainConfig::from_json(n.to_json()), n);
}

TEST(LrSchedule, ExactValues) {
  const auto c = TrainConfig::pretrain();
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(8000, c), 0.0005);
  EXPECT_DOUBLE_EQ(lr_at(16000, c), 0.001);
  EXPECT_EQ(lr_at(c.max_steps, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(383000, c), 0.0005);
}

TEST(LrSchedule, PiecewiseLinearAndNonNegative) {
  TrainConfig c;
  c.warmup = 10;
  c.max_steps = 30;
  for (std::size_t s = 0; s <= 40; ++s) {
    const double lr = lr_at(s, c);
    EXPECT_GE(lr, 0.0);
    EXPECT_LE(lr, c.peak_lr);
    const double expect = s <= 10   ? c.peak_lr * s / 10.0
                          : s <= 30 ? c.peak_lr * (30.0 - s) / 20.0
                                    : 0.0;
    EXPECT_NEAR(lr, expect, 1e-15) << s;
  }
}

TEST(Batching, PadsToLongest) {
  const auto b = make_batch({{5, 6, 7}, {8}}, {{2, 9}, {2}}, {{9, 3}, {3}});
  EXPECT_EQ(b.src.cols, 3u);
  EXPECT_EQ(b.src.at(1, 1), subword::kPadId);
  EXPECT_EQ(b.tgt_in.cols, 2u);
  EXPECT_EQ(b.labels, (std::vector<std::int32_t>{9, 3, 3, 0}));
  EXPECT_THROW(make_batch({{5}}, {{2, 9}}, {{9}}), Error);
}

TEST(Masks, CausalAndPadding) {
  const auto ids = matrix({{5, 6, 0}});
  const auto m = causal_padding_mask<float>(ids);
  ASSERT_EQ(m.shape(), (tensor::Shape{1, 1, 3, 3}));
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_EQ(m.values(),
            (std::vector<float>{0, -inf, -inf, 0, 0, -inf, 0, 0, -inf}));
  const auto k = key_padding_mask<float>(ids);
  EXPECT_EQ(k.shape(), (tensor::Shape{1, 1, 1, 3}));
  EXPECT_EQ(k.values(), (std::vector<float>{0, 0, -inf}));
}

TEST(Model, ShapeContract) {
  const auto cfg = ModelConfig::desk(40);
  Model m(cfg, 1);
  const auto logits = m.forward(matrix({{5, 6, 7, 3}, {8, 9, 3}}),
                                matrix({{2, 11, 12}, {2, 13, 0}}), false,
                                nullptr);
  EXPECT_EQ(logits.shape(), (tensor::Shape{2, 3, 40}));
  for (float v : logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, RejectsBadInput) {
  Model m(tiny_config(), 1);
  EXPECT_THROW(m.forward(matrix({{5, 99}}), matrix({{2}}), false, nullptr),
               Error);
  EXPECT_THROW(m.forward(matrix({{5}}), matrix({{2}}, 17), false, nullptr),
               Error);
  EXPECT_THROW(m.forward(matrix({{5}}), matrix({{2}}), true, nullptr), Error);
}

TEST(Model, ParameterInventory) {
  const auto cfg = tiny_config();
  Model m(cfg, 3);
  const std::size_t d = cfg.d_model, ff = cfg.d_ff, v = cfg.vocab;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * ff + ff + ff * d + d;
  const std::size_t ln = 2 * d;
  const std::size_t expect = v * d + cfg.max_positions * d + ln +
                             cfg.layers * (attn + ffn + 2 * ln) + ln +
                             cfg.layers * (2 * attn + ffn + 3 * ln) + ln;
  EXPECT_EQ(m.parameter_count(), expect);
  for (const auto& p : m.parameters()) {
    const bool norm_or_bias = p.name.ends_with(".bias") ||
                              p.name.ends_with(".gain");
    EXPECT_EQ(p.decay, !norm_or_bias) << p.name;
  }
}

TEST(Model, Causality) {
  Model m(ModelConfig::desk(30), 4);
  const auto src = matrix({{5, 6, 7, 3}});
  const auto a = m.forward(src, matrix({{2, 10, 11, 12, 13}}), false, nullptr);
  const auto b = m.forward(src, matrix({{2, 10, 11, 20, 21}}), false, nullptr);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(logits_at(a, 0, t), logits_at(b, 0, t)) << t;
  }
  EXPECT_NE(logits_at(a, 0, 3), logits_at(b, 0, 3));
}

TEST(Model, EncoderPaddingInvariance) {
  Model m(ModelConfig::desk(30), 5);
  const auto tgt = matrix({{2, 10, 11}});
  const auto plain = m.forward(matrix({{5, 6, 7, 3}}), tgt, false, nullptr);
  const auto padded =
      m.forward(matrix({{5, 6, 7, 3}}, 9), tgt, false, nullptr);
  EXPECT_LT(max_abs_diff(plain.values(), padded.values()), 1e-5);
}

TEST(Model, BatchRowsIndependentOfPadding) {
  Model m(ModelConfig::desk(30), 6);
  const auto alone =
      m.forward(matrix({{8, 9, 3}}), matrix({{2, 12}}), false, nullptr);
  const auto batched = m.forward(matrix({{5, 6, 7, 7, 7, 3}, {8, 9, 3}}),
                                 matrix({{2, 10, 11, 13}, {2, 12}}), false,
                                 nullptr);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_LT(max_abs_diff(logits_at(alone, 0, t), logits_at(batched, 1, t)),
              1e-5);
  }
}

TEST(Model, DeterministicInEval) {
  Model a(ModelConfig::desk(30), 9), b(ModelConfig::desk(30), 9);
  const auto src = matrix({{5, 6, 7, 3}});
  const auto tgt = matrix({{2, 10, 11}});
  const auto x = a.forward(src, tgt, false, nullptr);
  EXPECT_EQ(x.values(), a.forward(src, tgt, false, nullptr).values());
  EXPECT_EQ(x.values(), b.forward(src, tgt, false, nullptr).values());
  Model c(ModelConfig::desk(30), 10);
  EXPECT_NE(x.values(), c.forward(src, tgt, false, nullptr).values());
}

TEST(Model, DropoutActsOnlyInTraining) {
  Model m(ModelConfig::desk(30), 9);
  const auto src = matrix({{5, 6, 7, 3}});
  const auto tgt = matrix({{2, 10, 11}});
  Rng r1 = derive_rng({1}), r2 = derive_rng({1}), r3 = derive_rng({2});
  const auto a = m.forward(src, tgt, true, &r1);
  const auto b = m.forward(src, tgt, true, &r2);
  const auto c = m.forward(src, tgt, true, &r3);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), c.values());
  EXPECT_NE(a.values(), m.forward(src, tgt, false, nullptr).values());
}

TEST(Model, TiedEmbeddingsShareStorage) {
  Model m(tiny_config(), 2);
  EXPECT_EQ(m.token_embedding().node(), m.output_projection().node());
  const auto src = matrix({{5, 6, 3}});
  const auto tgt = matrix({{2, 7}});
  const auto before = m.forward(src, tgt, false, nullptr);
  m.token_embedding().node()->data[7 * 16] += 1.0f;
  EXPECT_EQ(m.output_projection().values()[7 * 16],
            m.token_embedding().values()[7 * 16]);
  EXPECT_NE(before.values(), m.forward(src, tgt, false, nullptr).values());

  auto untied = tiny_config();
  untied.tie_embeddings = false;
  Model u(untied, 2);
  EXPECT_NE(u.token_embedding().node(), u.output_projection().node());
  EXPECT_EQ(u.parameters().back().name, "output.weight");
}

TEST(Model, FullGradientCheck) {
  auto cfg = tiny_config(12);
  cfg.dropout = 0.0;
  Model64 m(cfg, 11);
  const auto batch =
      make_batch({{5, 6, 7, 3}, {8, 9, 3}}, {{2, 10, 11}, {2, 4}},
                 {{10, 11, 3}, {4, 3}});
  std::vector<tensor::Tensor64> inputs;
  for (const auto& p : m.parameters()) inputs.push_back(p.tensor);
  const double err = tensor::grad_check(
      [&](const std::vector<tensor::Tensor64>&) {
        return m.loss(batch, 0.1, false, nullptr);
      },
      inputs, {.h = 1e-4, .max_elements = 24, .seed = 3});
  EXPECT_LT(err, 5e-3);
}

TEST(Model, LossReachesEveryParameter) {
  Model m(tiny_config(), 12);
  const auto batch = make_batch({{5, 6, 3}}, {{2, 10}}, {{10, 3}});
  {
    Tape<float> tape;
    tape.backward(m.loss(batch, 0.1, false, nullptr));
  }
  for (const auto& p : m.parameters()) {
    EXPECT_EQ(p.tensor.grad().size(), p.tensor.numel()) << p.name;
  }
}

// Independent scalar Adam simulation.
double simulate_adam(double x, double lr, int steps, const TrainConfig& c) {
  double m = 0, v = 0;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2 * x;
    m = c.adam_beta1 * m + (1 - c.adam_beta1) * g;
    v = c.adam_beta2 * v + (1 - c.adam_beta2) * g * g;
    const double mh = m / (1 - std::pow(c.adam_beta1, t));
    const double vh = v / (1 - std::pow(c.adam_beta2, t));
    x -= lr * mh / (std::sqrt(vh) + c.adam_eps);
  }
  return x;
}

std::vector<Model::Parameter> scalar_param(float x, bool decay) {
  return {{"x", Model::Tensor::from({1}, {x}, true), decay}};
}

TEST(Adam, QuadraticConverges) {
  TrainConfig c;
  c.weight_decay = 0;
  auto params = scalar_param(1.0f, true);
  AdamState s;
  for (int i = 0; i < 200; ++i) {
    auto& x = params[0].tensor;
    x.mutable_grad()[0] = 2 * x.values()[0];
    adam_step(params, s, 0.1, c);
  }
  const double x = params[0].tensor.values()[0];
  EXPECT_LT(std::abs(x), 0.05);
  EXPECT_NEAR(x, simulate_adam(1.0, 0.1, 200, c), 1e-4);
  EXPECT_EQ(s.step, 200u);
}

TEST(Adam, ZeroGradsLeaveParamsWithoutDecay) {
  TrainConfig c;
  c.weight_decay = 0;
  auto params = scalar_param(0.75f, true);
  params[0].tensor.mutable_grad()[0] = 0;
  AdamState s;
  for (int i = 0; i < 5; ++i) adam_step(params, s, 0.01, c);
  EXPECT_EQ(params[0].tensor.values()[0], 0.75f);
}

TEST(Adam, DecayShrinksGeometrically) {
  TrainConfig c;
  c.weight_decay = 0.1;
  auto params = scalar_param(2.0f, true);
  params.push_back({"b", Model::Tensor::from({1}, {2.0f}, true), false});
  AdamState s;
  for (int i = 0; i < 10; ++i) adam_step(params, s, 0.5, c);
  EXPECT_NEAR(params[0].tensor.values()[0], 2.0 * std::pow(1 - 0.05, 10), 1e-6);
  EXPECT_EQ(params[1].tensor.values()[0], 2.0f);
}

TEST(Adam, NonFiniteGradientTouchesNothing) {
  TrainConfig c;
  auto params = scalar_param(1.0f, true);
  params.push_back({"y", Model::Tensor::from({1}, {1.0f}, true), true});
  params[0].tensor.mutable_grad()[0] = 1.0f;
  params[1].tensor.mutable_grad()[0] = std::nanf("");
  AdamState s;
  EXPECT_THROW(adam_step(params, s, 0.1, c), NonFiniteGradient);
  EXPECT_EQ(params[0].tensor.values()[0], 1.0f);
  EXPECT_EQ(s.step, 0u);
}

TEST(Adam, ClipGradNorm) {
  auto params = scalar_param(0, true);
  params.push_back({"y", Model::Tensor::from({1}, {0.f}, true), true});
  params[0].tensor.mutable_grad()[0] = 3;
  params[1].tensor.mutable_grad()[0] = 4;
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(params[0].tensor.grad()[0], 0.6f, 1e-7);
  EXPECT_NEAR(params[1].tensor.grad()[0], 0.8f, 1e-7);
  EXPECT_NEAR(clip_grad_norm(params, 1.0), 1.0, 1e-6);
}

TEST(Training, OverfitsRepeatedBatch) {
  auto cfg = ModelConfig::desk(32);
  cfg.dropout = 0.0;
  Model m(cfg, 21);
  TrainConfig tc;
  const auto batch =
      make_batch({{5, 6, 7, 8, 3}, {9, 10, 11, 3}, {12, 13, 3}},
                 {{2, 14, 15, 16}, {2, 17, 18}, {2, 19}},
                 {{14, 15, 16, 3}, {17, 18, 3}, {19, 3}});
  AdamState s;
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    zero_grads(m.parameters());
    double l = 0;
    {
      Tape<float> tape;
      auto loss = m.loss(batch, tc.label_smoothing, true, nullptr);
      l = loss.item();
      tape.backward(loss);
    }
    EXPECT_LT(l, prev) << "step " << step;
    prev = l;
    clip_grad_norm(m.parameters(), tc.clip_norm);
    adam_step(m.parameters(), s, 1e-3, tc);
  }
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("ibkt_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()
                                              ->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }

  fs::path dir_;
};

TEST_F(CheckpointTest, BitExactRoundTrip) {
  Model m(tiny_config(), 5);
  AdamState s;
  const auto batch = make_batch({{5, 6, 3}}, {{2, 10}}, {{10, 3}});
  {
    Tape<float> tape;
    tape.backward(m.loss(batch, 0.1, false, nullptr));
  }
  adam_step(m.parameters(), s, 1e-3, TrainConfig{});

  Checkpoint c;
  c.model = m.config();
  c.vocab_hash = "abc123";
  c.step = 42;
  c.extra["adam_step"] = s.step;
  c.tensors = model_tensors(m);
  for (auto& t : adam_tensors(m, s)) c.tensors.push_back(std::move(t));
  const auto path = dir_ / "a.ckpt";
  save_checkpoint(path, c);

  const std::string bytes = slurp(path);
  EXPECT_EQ(bytes.substr(0, 6), "IBKT1\n");
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));

  const auto loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.model, c.model);
  EXPECT_EQ(loaded.train, c.train);
  EXPECT_EQ(loaded.vocab_hash, "abc123");
  EXPECT_EQ(loaded.step, 42u);
  ASSERT_EQ(loaded.tensors.size(), c.tensors.size());
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    EXPECT_EQ(loaded.tensors[i].name, c.tensors[i].name);
    EXPECT_EQ(loaded.tensors[i].shape, c.tensors[i].shape);
    EXPECT_EQ(0, std::memcmp(loaded.tensors[i].values.data(),
                             c.tensors[i].values.data(),
                             c.tensors[i].values.size() * sizeof(float)));
  }

  Model r(tiny_config(), 99);
  restore_model(r, loaded);
  AdamState rs;
  restore_adam(r, loaded, rs);
  EXPECT_EQ(rs.step, s.step);
  EXPECT_EQ(rs.m, s.m);
  EXPECT_EQ(rs.v, s.v);
  for (std::size_t i = 0; i < r.parameters().size(); ++i) {
    EXPECT_EQ(r.parameters()[i].tensor.values(),
              m.parameters()[i].tensor.values());
  }

  save_checkpoint(dir_ / "b.ckpt", loaded);
  EXPECT_EQ(slurp(dir_ / "b.ckpt"), bytes);

  const auto meta = read_checkpoint_metadata(path);
  EXPECT_EQ(meta.step, 42u);
  EXPECT_TRUE(meta.tensors.front().values.empty());
}

TEST_F(CheckpointTest, LittleEndianLayout) {
  Checkpoint c;
  c.model = tiny_config();
  c.tensors.push_back({"t", {2}, {1.0f, -2.0f}});
  const auto path = dir_ / "le.ckpt";
  save_checkpoint(path, c);
  const std::string b = slurp(path);
  std::uint64_t meta_len = 0;
  for (int i = 7; i >= 0; --i) {
    meta_len = (meta_len << 8) | static_cast<unsigned char>(b[6 + i]);
  }
  const std::size_t off = 6 + 8 + meta_len;
  ASSERT_EQ(b.size(), off + 8 + 8);
  EXPECT_EQ(static_cast<unsigned char>(b[off]), 8);
  // 1.0f = 0x3F800000, -2.0f = 0xC0000000
  EXPECT_EQ(b.substr(off + 8), std::string("\x00\x00\x80\x3F\x00\x00\x00\xC0", 8));
  EXPECT_NO_THROW(nlohmann::json::parse(b.substr(14, meta_len)));
}

TEST_F(CheckpointTest, RejectsCorruptFiles) {
  const auto path = dir_ / "bad.ckpt";
  std::ofstream(path) << "NOPE";
  EXPECT_THROW(load_checkpoint(path), FormatError);

  Checkpoint c;
  c.model = tiny_config();
  c.tensors = model_tensors(Model(tiny_config(), 1));
  save_checkpoint(path, c);
  std::string bytes = slurp(path);
  std::ofstream(path, std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() - 3);
  EXPECT_THROW(load_checkpoint(path), FormatError);

  auto other = tiny_config();
  other.d_ff = 64;
  Model m(other, 1);
  EXPECT_THROW(restore_model(m, c), FormatError);
}

}  // namespace
}  // namespace ibkt::model
