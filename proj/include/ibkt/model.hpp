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
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ibkt/error.hpp"
#include "ibkt/rng.hpp"
#include "ibkt/subword.hpp"
#include "ibkt/tensor.hpp"
#include "json.hpp"

namespace ibkt::model {

using subword::TokenId;
using subword::TokenIds;
using tensor::BasicTensor;

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t d_model = 1024;
  std::size_t d_ff = 4096;
  std::size_t heads = 16;
  double dropout = 0.1;
  std::size_t max_positions = 512;
  std::size_t vocab = 0;
  bool tie_embeddings = true;

  static ModelConfig full(std::size_t vocab);
  static ModelConfig scratch(std::size_t vocab);  // 512 / 2048
  static ModelConfig desk(std::size_t vocab);     // N=2, 64 / 256, 4 heads
  // "full", "scratch" or "desk".
  static ModelConfig preset(std::string_view name, std::size_t vocab);

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double peak_lr = 0.001;
  std::size_t warmup = 16000;
  std::size_t max_steps = 750000;
  double weight_decay = 1e-5;
  double label_smoothing = 0.1;
  std::size_t tokens_per_batch = 4096;
  std::size_t eval_every = 1000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::size_t patience = 10;
  double temperature = 1.0;  // multilingual sampling
  std::uint64_t seed = 0;

  static TrainConfig pretrain();
  static TrainConfig finetune_nmt();
  static TrainConfig finetune_summarization();

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

// Linear warmup to peak_lr over `warmup` steps, then linear decay to zero
// at max_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

// Row-major [rows, cols] id matrix, PAD-filled.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

TokenMatrix pad_sequences(const std::vector<TokenIds>& seqs,
                          std::size_t min_cols = 0);

struct Batch {
  TokenMatrix src;
  TokenMatrix tgt_in;
  std::vector<std::int32_t> labels;  // tgt_in.rows * tgt_in.cols, PAD-filled

  std::size_t size() const { return src.rows; }
};

// decoder_input / labels must have equal lengths per example.
Batch make_batch(const std::vector<TokenIds>& encoder,
                 const std::vector<TokenIds>& decoder_input,
                 const std::vector<TokenIds>& labels);

// Pre-LN encoder-decoder transformer with tied embeddings.
template <class T>
class BasicModel {
 public:
  using Tensor = BasicTensor<T>;

  struct Parameter {
    std::string name;
    Tensor tensor;
    bool decay = true;  // false for biases and layernorm tensors
  };

  struct Encoded {
    Tensor memory;  // [B, Ts, d]
    Tensor mask;    // [B, 1, 1, Ts] additive
  };

  BasicModel() = default;
  BasicModel(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  const Tensor& token_embedding() const { return tok_emb_; }
  // Shares storage with token_embedding() when embeddings are tied.
  const Tensor& output_projection() const { return out_proj_; }

  Encoded encode(const TokenMatrix& src, bool train, Rng* rng) const;
  // Final decoder states [B, Td, d].
  Tensor decode_hidden(const Encoded& enc, const TokenMatrix& tgt_in,
                       bool train, Rng* rng) const;
  Tensor project(const Tensor& hidden) const;  // -> logits [..., V]
  // logits [B, Td, V]
  Tensor forward(const TokenMatrix& src, const TokenMatrix& tgt_in, bool train,
                 Rng* rng) const;
  // Label-smoothed cross entropy over non-PAD labels.
  Tensor loss(const Batch& batch, double label_smoothing, bool train,
              Rng* rng) const;

 private:
  struct LayerNorm {
    Tensor gain, bias;
  };
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    LayerNorm attn_ln;
    Attention attn;
    LayerNorm ffn_ln;
    FeedForward ffn;
  };
  struct DecoderLayer {
    LayerNorm self_ln;
    Attention self_attn;
    LayerNorm cross_ln;
    Attention cross_attn;
    LayerNorm ffn_ln;
    FeedForward ffn;
  };

  Tensor add_param(const std::string& name, tensor::Shape shape, double stddev,
                   double fill, bool decay, Rng& rng);
  LayerNorm make_ln(const std::string& name, Rng& rng);
  Attention make_attn(const std::string& name, Rng& rng);
  FeedForward make_ffn(const std::string& name, Rng& rng);

  Tensor embed(const TokenMatrix& ids, bool train, Rng* rng) const;
  Tensor layer_norm(const Tensor& x, const LayerNorm& ln) const;
  Tensor attention(const Tensor& xq, const Tensor& xkv, const Attention& a,
                   const Tensor& mask) const;
  Tensor feed_forward(const Tensor& x, const FeedForward& f) const;
  Tensor drop(const Tensor& x, bool train, Rng* rng) const;
  void check_ids(const TokenMatrix& m, const char* what) const;

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  Tensor tok_emb_, pos_emb_, out_proj_;
  LayerNorm emb_ln_, enc_final_ln_, dec_final_ln_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

// Additive attention masks (0 or -inf).
template <class T>
BasicTensor<T> key_padding_mask(const TokenMatrix& ids);
template <class T>
BasicTensor<T> causal_padding_mask(const TokenMatrix& ids);

// ---------------------------------------------------------------------------
// Optimization

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m, v;  // parallel to parameters
};

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(const std::vector<Model::Parameter>& params,
                      double max_norm);

// Adam with bias correction and decoupled weight decay (p *= 1 - lr*wd on
// decaying tensors). Throws NonFiniteGradient without touching anything if
// any gradient is NaN/inf. Missing gradients count as zero.
void adam_step(const std::vector<Model::Parameter>& params, AdamState& state,
               double lr, const TrainConfig& cfg);

void zero_grads(const std::vector<Model::Parameter>& params);

// ---------------------------------------------------------------------------
// Checkpoints: "IBKT1\n", u64 LE metadata length, JSON metadata, then each
// tensor as u64 LE byte length + LE float32 values, in metadata order.

struct NamedTensor {
  std::string name;
  tensor::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::string vocab_hash;
  std::uint64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Metadata only; tensors are skipped.
Checkpoint read_checkpoint_metadata(const std::filesystem::path& path);

std::vector<NamedTensor> model_tensors(const Model& model);
std::vector<NamedTensor> adam_tensors(const Model& model, const AdamState& s);
// Loads parameters (and Adam moments when `state` is given and present).
void restore_model(Model& model, const Checkpoint& ckpt);
void restore_adam(const Model& model, const Checkpoint& ckpt, AdamState& state);

}  // namespace ibkt::model
