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

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>

namespace ibkt::model {

using tensor::Shape;

// ---------------------------------------------------------------------------
// Configs

ModelConfig ModelConfig::full(std::size_t vocab) {
  ModelConfig c;
  c.vocab = vocab;
  return c;
}

ModelConfig ModelConfig::scratch(std::size_t vocab) {
  ModelConfig c = full(vocab);
  c.d_model = 512;
  c.d_ff = 2048;
  return c;
}

ModelConfig ModelConfig::desk(std::size_t vocab) {
  ModelConfig c = full(vocab);
  c.layers = 2;
  c.d_model = 64;
  c.d_ff = 256;
  c.heads = 4;
  return c;
}

ModelConfig ModelConfig::preset(std::string_view name, std::size_t vocab) {
  if (name == "full") return full(vocab);
  if (name == "scratch") return scratch(vocab);
  if (name == "desk") return desk(vocab);
  throw Error("unknown model preset '" + std::string(name) +
              "' (expected full, scratch or desk)");
}

void ModelConfig::validate() const {
  if (layers == 0 || d_model == 0 || d_ff == 0 || heads == 0) {
    throw Error("model config: sizes must be positive");
  }
  if (d_model % heads != 0) {
    throw Error("model config: d_model " + std::to_string(d_model) +
                " is not divisible by heads " + std::to_string(heads));
  }
  if (vocab == 0) throw Error("model config: vocab size is zero");
  if (max_positions == 0) throw Error("model config: max_positions is zero");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw Error("model config: dropout must lie in [0, 1)");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"layers", layers},   {"d_model", d_model},
          {"d_ff", d_ff},       {"heads", heads},
          {"dropout", dropout}, {"max_positions", max_positions},
          {"vocab", vocab},     {"tie_embeddings", tie_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers");
  c.d_model = j.at("d_model");
  c.d_ff = j.at("d_ff");
  c.heads = j.at("heads");
  c.dropout = j.at("dropout");
  c.max_positions = j.at("max_positions");
  c.vocab = j.at("vocab");
  c.tie_embeddings = j.at("tie_embeddings");
  return c;
}

TrainConfig TrainConfig::pretrain() { return TrainConfig{}; }

TrainConfig TrainConfig::finetune_nmt() {
  TrainConfig c;
  c.tokens_per_batch = 2048;
  return c;
}

TrainConfig TrainConfig::finetune_summarization() {
  TrainConfig c = finetune_nmt();
  c.warmup = 4000;
  return c;
}

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw Error("train config: peak_lr must be positive");
  if (max_steps == 0) throw Error("train config: max_steps must be positive");
  if (warmup > max_steps) {
    throw Error("train config: warmup exceeds max_steps");
  }
  if (tokens_per_batch == 0) {
    throw Error("train config: tokens_per_batch must be positive");
  }
  if (eval_every == 0) throw Error("train config: eval_every must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
    throw Error("train config: label_smoothing must lie in [0, 1)");
  }
  if (!(temperature > 0.0)) {
    throw Error("train config: temperature must be positive");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"peak_lr", peak_lr},
          {"warmup", warmup},
          {"max_steps", max_steps},
          {"weight_decay", weight_decay},
          {"label_smoothing", label_smoothing},
          {"tokens_per_batch", tokens_per_batch},
          {"eval_every", eval_every},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"clip_norm", clip_norm},
          {"patience", patience},
          {"temperature", temperature},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.peak_lr = j.at("peak_lr");
  c.warmup = j.at("warmup");
  c.max_steps = j.at("max_steps");
  c.weight_decay = j.at("weight_decay");
  c.label_smoothing = j.at("label_smoothing");
  c.tokens_per_batch = j.at("tokens_per_batch");
  c.eval_every = j.at("eval_every");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.clip_norm = j.at("clip_norm");
  c.patience = j.at("patience");
  c.temperature = j.at("temperature");
  c.seed = j.at("seed");
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.max_steps) return 0.0;
  if (step <= cfg.warmup) {
    if (cfg.warmup == 0) return cfg.peak_lr;
    return cfg.peak_lr * static_cast<double>(step) /
           static_cast<double>(cfg.warmup);
  }
  const double lr = cfg.peak_lr * static_cast<double>(cfg.max_steps - step) /
                    static_cast<double>(cfg.max_steps - cfg.warmup);
  return std::max(0.0, lr);
}

// ---------------------------------------------------------------------------
// Batches

TokenMatrix pad_sequences(const std::vector<TokenIds>& seqs,
                          std::size_t min_cols) {
  TokenMatrix m;
  m.rows = seqs.size();
  m.cols = min_cols;
  for (const auto& s : seqs) m.cols = std::max(m.cols, s.size());
  m.ids.assign(m.rows * m.cols, subword::kPadId);
  for (std::size_t r = 0; r < m.rows; ++r) {
    std::copy(seqs[r].begin(), seqs[r].end(), m.ids.begin() + r * m.cols);
  }
  return m;
}

Batch make_batch(const std::vector<TokenIds>& encoder,
                 const std::vector<TokenIds>& decoder_input,
                 const std::vector<TokenIds>& labels) {
  if (encoder.size() != decoder_input.size() ||
      encoder.size() != labels.size()) {
    throw Error("make_batch: mismatched example counts");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != decoder_input[i].size()) {
      throw Error("make_batch: decoder input and labels differ in length");
    }
  }
  Batch b;
  b.src = pad_sequences(encoder);
  b.tgt_in = pad_sequences(decoder_input);
  b.labels = pad_sequences(labels, b.tgt_in.cols).ids;
  return b;
}

// ---------------------------------------------------------------------------
// Masks

template <class T>
BasicTensor<T> key_padding_mask(const TokenMatrix& ids) {
  std::vector<T> m(ids.ids.size(), T(0));
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (ids.ids[i] == subword::kPadId) {
      m[i] = -std::numeric_limits<T>::infinity();
    }
  }
  return BasicTensor<T>::from({ids.rows, 1, 1, ids.cols}, std::move(m));
}

template <class T>
BasicTensor<T> causal_padding_mask(const TokenMatrix& ids) {
  const std::size_t b = ids.rows, t = ids.cols;
  std::vector<T> m(b * t * t, T(0));
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        if (j > i || ids.at(r, j) == subword::kPadId) {
          m[(r * t + i) * t + j] = -std::numeric_limits<T>::infinity();
        }
      }
    }
  }
  return BasicTensor<T>::from({b, 1, t, t}, std::move(m));
}

// ---------------------------------------------------------------------------
// Model

namespace {

double normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

constexpr double kInitStd = 0.02;

}  // namespace

template <class T>
BasicModel<T>::BasicModel(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = derive_rng({seed, 0x696e6974});
  const std::size_t d = cfg_.d_model;
  tok_emb_ = add_param("embed.tokens", {cfg_.vocab, d}, kInitStd, 0, true, rng);
  pos_emb_ = add_param("embed.positions", {cfg_.max_positions, d}, kInitStd, 0,
                       true, rng);
  emb_ln_ = make_ln("embed.ln", rng);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = "encoder." + std::to_string(i) + ".";
    EncoderLayer l;
    l.attn_ln = make_ln(p + "self_attn_ln", rng);
    l.attn = make_attn(p + "self_attn", rng);
    l.ffn_ln = make_ln(p + "ffn_ln", rng);
    l.ffn = make_ffn(p + "ffn", rng);
    enc_.push_back(std::move(l));
  }
  enc_final_ln_ = make_ln("encoder.ln", rng);
  for (std::size_t i = 0; i < cfg_.layers; ++i) {
    const std::string p = "decoder." + std::to_string(i) + ".";
    DecoderLayer l;
    l.self_ln = make_ln(p + "self_attn_ln", rng);
    l.self_attn = make_attn(p + "self_attn", rng);
    l.cross_ln = make_ln(p + "cross_attn_ln", rng);
    l.cross_attn = make_attn(p + "cross_attn", rng);
    l.ffn_ln = make_ln(p + "ffn_ln", rng);
    l.ffn = make_ffn(p + "ffn", rng);
    dec_.push_back(std::move(l));
  }
  dec_final_ln_ = make_ln("decoder.ln", rng);
  out_proj_ = cfg_.tie_embeddings
                  ? tok_emb_
                  : add_param("output.weight", {cfg_.vocab, d}, kInitStd, 0,
                              true, rng);
}

template <class T>
BasicTensor<T> BasicModel<T>::add_param(const std::string& name, Shape shape,
                                        double stddev, double fill, bool decay,
                                        Rng& rng) {
  std::vector<T> data(tensor::numel(shape));
  for (auto& v : data) {
    v = static_cast<T>(stddev > 0 ? stddev * normal(rng) : fill);
  }
  auto t = Tensor::from(std::move(shape), std::move(data), true);
  params_.push_back({name, t, decay});
  return t;
}

template <class T>
typename BasicModel<T>::LayerNorm BasicModel<T>::make_ln(
    const std::string& name, Rng& rng) {
  LayerNorm ln;
  ln.gain = add_param(name + ".gain", {cfg_.d_model}, 0, 1.0, false, rng);
  ln.bias = add_param(name + ".bias", {cfg_.d_model}, 0, 0.0, false, rng);
  return ln;
}

template <class T>
typename BasicModel<T>::Attention BasicModel<T>::make_attn(
    const std::string& name, Rng& rng) {
  const std::size_t d = cfg_.d_model;
  Attention a;
  a.wq = add_param(name + ".q.weight", {d, d}, kInitStd, 0, true, rng);
  a.bq = add_param(name + ".q.bias", {d}, 0, 0, false, rng);
  a.wk = add_param(name + ".k.weight", {d, d}, kInitStd, 0, true, rng);
  a.bk = add_param(name + ".k.bias", {d}, 0, 0, false, rng);
  a.wv = add_param(name + ".v.weight", {d, d}, kInitStd, 0, true, rng);
  a.bv = add_param(name + ".v.bias", {d}, 0, 0, false, rng);
  a.wo = add_param(name + ".out.weight", {d, d}, kInitStd, 0, true, rng);
  a.bo = add_param(name + ".out.bias", {d}, 0, 0, false, rng);
  return a;
}

template <class T>
typename BasicModel<T>::FeedForward BasicModel<T>::make_ffn(
    const std::string& name, Rng& rng) {
  const std::size_t d = cfg_.d_model, ff = cfg_.d_ff;
  FeedForward f;
  f.w1 = add_param(name + ".fc1.weight", {d, ff}, kInitStd, 0, true, rng);
  f.b1 = add_param(name + ".fc1.bias", {ff}, 0, 0, false, rng);
  f.w2 = add_param(name + ".fc2.weight", {ff, d}, kInitStd, 0, true, rng);
  f.b2 = add_param(name + ".fc2.bias", {d}, 0, 0, false, rng);
  return f;
}

template <class T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <class T>
void BasicModel<T>::check_ids(const TokenMatrix& m, const char* what) const {
  if (m.cols > cfg_.max_positions) {
    throw Error(std::string(what) + " length " + std::to_string(m.cols) +
                " exceeds max_positions " + std::to_string(cfg_.max_positions));
  }
  for (auto id : m.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab) {
      throw Error(std::string(what) + " id " + std::to_string(id) +
                  " out of range for V=" + std::to_string(cfg_.vocab));
    }
  }
}

template <class T>
BasicTensor<T> BasicModel<T>::drop(const Tensor& x, bool train,
                                   Rng* rng) const {
  if (!train || cfg_.dropout == 0.0) return x;
  if (rng == nullptr) throw Error("model: training forward needs an rng");
  return tensor::dropout(x, cfg_.dropout, *rng, true);
}

template <class T>
BasicTensor<T> BasicModel<T>::layer_norm(const Tensor& x,
                                         const LayerNorm& ln) const {
  return tensor::layernorm(x, ln.gain, ln.bias);
}

template <class T>
BasicTensor<T> BasicModel<T>::embed(const TokenMatrix& ids, bool train,
                                    Rng* rng) const {
  const std::size_t b = ids.rows, t = ids.cols, d = cfg_.d_model;
  auto x = tensor::embedding(tok_emb_, std::span<const std::int32_t>(ids.ids));
  x = tensor::scale(tensor::reshape(x, {b, t, d}),
                    static_cast<T>(std::sqrt(static_cast<double>(d))));
  x = tensor::add(x, tensor::slice(pos_emb_, 0, 0, t));
  return drop(layer_norm(x, emb_ln_), train, rng);
}

template <class T>
BasicTensor<T> BasicModel<T>::attention(const Tensor& xq, const Tensor& xkv,
                                        const Attention& a,
                                        const Tensor& mask) const {
  const std::size_t b = xq.dim(0), tq = xq.dim(1), tk = xkv.dim(1);
  const std::size_t h = cfg_.heads, d = cfg_.d_model, dh = d / h;
  auto split = [&](const Tensor& x, std::size_t t) {
    auto y = tensor::reshape(x, {b, t, h, dh});
    return tensor::reshape(tensor::permute(y, {0, 2, 1, 3}), {b * h, t, dh});
  };
  auto q = tensor::add(tensor::matmul(xq, a.wq), a.bq);
  q = tensor::scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  const auto k = tensor::add(tensor::matmul(xkv, a.wk), a.bk);
  const auto v = tensor::add(tensor::matmul(xkv, a.wv), a.bv);
  auto scores = tensor::bmm(split(q, tq), split(k, tk), true);
  scores = tensor::add(tensor::reshape(scores, {b, h, tq, tk}), mask);
  auto probs = tensor::reshape(tensor::softmax(scores, -1), {b * h, tq, tk});
  auto ctx = tensor::bmm(probs, split(v, tk));
  ctx = tensor::permute(tensor::reshape(ctx, {b, h, tq, dh}), {0, 2, 1, 3});
  ctx = tensor::reshape(ctx, {b, tq, d});
  return tensor::add(tensor::matmul(ctx, a.wo), a.bo);
}

template <class T>
BasicTensor<T> BasicModel<T>::feed_forward(const Tensor& x,
                                           const FeedForward& f) const {
  auto hdn = tensor::gelu(tensor::add(tensor::matmul(x, f.w1), f.b1));
  return tensor::add(tensor::matmul(hdn, f.w2), f.b2);
}

template <class T>
typename BasicModel<T>::Encoded BasicModel<T>::encode(const TokenMatrix& src,
                                                      bool train,
                                                      Rng* rng) const {
  check_ids(src, "encoder input");
  Encoded e;
  e.mask = key_padding_mask<T>(src);
  auto x = embed(src, train, rng);
  for (const auto& l : enc_) {
    auto hn = layer_norm(x, l.attn_ln);
    x = tensor::add(x, drop(attention(hn, hn, l.attn, e.mask), train, rng));
    hn = layer_norm(x, l.ffn_ln);
    x = tensor::add(x, drop(feed_forward(hn, l.ffn), train, rng));
  }
  e.memory = layer_norm(x, enc_final_ln_);
  return e;
}

template <class T>
BasicTensor<T> BasicModel<T>::decode_hidden(const Encoded& enc,
                                            const TokenMatrix& tgt_in,
                                            bool train, Rng* rng) const {
  check_ids(tgt_in, "decoder input");
  if (tgt_in.rows != enc.memory.dim(0)) {
    throw Error("decoder batch size " + std::to_string(tgt_in.rows) +
                " differs from encoder batch size " +
                std::to_string(enc.memory.dim(0)));
  }
  const auto self_mask = causal_padding_mask<T>(tgt_in);
  auto x = embed(tgt_in, train, rng);
  for (const auto& l : dec_) {
    auto hn = layer_norm(x, l.self_ln);
    x = tensor::add(x, drop(attention(hn, hn, l.self_attn, self_mask), train,
                            rng));
    hn = layer_norm(x, l.cross_ln);
    x = tensor::add(x, drop(attention(hn, enc.memory, l.cross_attn, enc.mask),
                            train, rng));
    hn = layer_norm(x, l.ffn_ln);
    x = tensor::add(x, drop(feed_forward(hn, l.ffn), train, rng));
  }
  return layer_norm(x, dec_final_ln_);
}

template <class T>
BasicTensor<T> BasicModel<T>::project(const Tensor& hidden) const {
  return tensor::matmul_nt(hidden, out_proj_);
}

template <class T>
BasicTensor<T> BasicModel<T>::forward(const TokenMatrix& src,
                                      const TokenMatrix& tgt_in, bool train,
                                      Rng* rng) const {
  const auto enc = encode(src, train, rng);
  return project(decode_hidden(enc, tgt_in, train, rng));
}

template <class T>
BasicTensor<T> BasicModel<T>::loss(const Batch& batch, double label_smoothing,
                                   bool train, Rng* rng) const {
  const auto logits = forward(batch.src, batch.tgt_in, train, rng);
  const auto flat =
      tensor::reshape(logits, {batch.tgt_in.rows * batch.tgt_in.cols,
                               cfg_.vocab});
  return tensor::cross_entropy_label_smoothed(
      flat, std::span<const std::int32_t>(batch.labels), label_smoothing,
      subword::kPadId);
}

template class BasicModel<float>;
template class BasicModel<double>;
template BasicTensor<float> key_padding_mask<float>(const TokenMatrix&);
template BasicTensor<double> key_padding_mask<double>(const TokenMatrix&);
template BasicTensor<float> causal_padding_mask<float>(const TokenMatrix&);
template BasicTensor<double> causal_padding_mask<double>(const TokenMatrix&);

// ---------------------------------------------------------------------------
// Optimization

void zero_grads(const std::vector<Model::Parameter>& params) {
  for (const auto& p : params) p.tensor.node()->grad.clear();
}

double clip_grad_norm(const std::vector<Model::Parameter>& params,
                      double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto factor = static_cast<float>(max_norm / norm);
    for (const auto& p : params) {
      for (float& g : p.tensor.node()->grad) g *= factor;
    }
  }
  return norm;
}

void adam_step(const std::vector<Model::Parameter>& params, AdamState& state,
               double lr, const TrainConfig& cfg) {
  for (const auto& p : params) {
    for (float g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NonFiniteGradient("non-finite gradient in " + p.name);
      }
    }
  }
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.f);
      state.v.emplace_back(p.tensor.numel(), 0.f);
    }
  }
  ++state.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double shrink = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    tensor::Node<float>* node = params[i].tensor.node();
    const bool has_grad = !node->grad.empty();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < node->data.size(); ++j) {
      const double g = has_grad ? node->grad[j] : 0.0;
      double w = node->data[j];
      if (params[i].decay) w *= shrink;
      const double mj = b1 * m[j] + (1.0 - b1) * g;
      const double vj = b2 * v[j] + (1.0 - b2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      w -= lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.adam_eps);
      node->data[j] = static_cast<float>(w);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kMagic = "IBKT1\n";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(std::istream& in, const std::filesystem::path& path) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw FormatError("checkpoint " + path.string() + " is truncated");
  }
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

nlohmann::json metadata_of(const Checkpoint& c) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : c.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  return {{"format", "IBKT1"},   {"model", c.model.to_json()},
          {"train", c.train.to_json()}, {"vocab_hash", c.vocab_hash},
          {"step", c.step},      {"extra", c.extra},
          {"tensors", tensors}};
}

Checkpoint read_impl(const std::filesystem::path& path, bool with_tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string magic(kMagic.size(), '\0');
  if (!in.read(magic.data(), static_cast<std::streamsize>(magic.size())) ||
      magic != kMagic) {
    throw FormatError(path.string() + " is not an IBKT1 checkpoint");
  }
  const std::uint64_t meta_len = get_u64(in, path);
  std::string meta(meta_len, '\0');
  if (!in.read(meta.data(), static_cast<std::streamsize>(meta_len))) {
    throw FormatError("checkpoint " + path.string() + " is truncated");
  }
  const auto j = nlohmann::json::parse(meta);
  Checkpoint c;
  c.model = ModelConfig::from_json(j.at("model"));
  c.train = TrainConfig::from_json(j.at("train"));
  c.vocab_hash = j.at("vocab_hash");
  c.step = j.at("step");
  c.extra = j.at("extra");
  for (const auto& t : j.at("tensors")) {
    NamedTensor nt;
    nt.name = t.at("name");
    nt.shape = t.at("shape").get<Shape>();
    c.tensors.push_back(std::move(nt));
  }
  if (!with_tensors) return c;
  for (auto& t : c.tensors) {
    const std::uint64_t bytes = get_u64(in, path);
    const std::size_t n = tensor::numel(t.shape);
    if (bytes != n * 4) {
      throw FormatError("checkpoint tensor " + t.name + " has " +
                        std::to_string(bytes) + " bytes, expected " +
                        std::to_string(n * 4));
    }
    std::string raw(bytes, '\0');
    if (!in.read(raw.data(), static_cast<std::streamsize>(bytes))) {
      throw FormatError("checkpoint " + path.string() + " is truncated");
    }
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) {
        u = (u << 8) | static_cast<unsigned char>(raw[i * 4 + b]);
      }
      t.values[i] = std::bit_cast<float>(u);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("checkpoint " + path.string() + " has trailing bytes");
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  std::string out(kMagic);
  const std::string meta = metadata_of(c).dump();
  put_u64(out, meta.size());
  out += meta;
  for (const auto& t : c.tensors) {
    if (t.values.size() != tensor::numel(t.shape)) {
      throw Error("checkpoint tensor " + t.name + " does not match its shape");
    }
    put_u64(out, t.values.size() * 4);
    for (float f : t.values) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return read_impl(path, true);
}

Checkpoint read_checkpoint_metadata(const std::filesystem::path& path) {
  return read_impl(path, false);
}

std::vector<NamedTensor> model_tensors(const Model& model) {
  std::vector<NamedTensor> out;
  for (const auto& p : model.parameters()) {
    out.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  }
  return out;
}

std::vector<NamedTensor> adam_tensors(const Model& model, const AdamState& s) {
  std::vector<NamedTensor> out;
  if (s.m.size() != model.parameters().size()) return out;
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), s.m[i]});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), s.v[i]});
  }
  return out;
}

namespace {

std::map<std::string, const NamedTensor*> index_tensors(const Checkpoint& c) {
  std::map<std::string, const NamedTensor*> m;
  for (const auto& t : c.tensors) m[t.name] = &t;
  return m;
}

const NamedTensor& find_tensor(
    const std::map<std::string, const NamedTensor*>& idx,
    const std::string& name, const Shape& shape) {
  auto it = idx.find(name);
  if (it == idx.end()) throw FormatError("checkpoint lacks tensor " + name);
  if (it->second->shape != shape) {
    throw FormatError("checkpoint tensor " + name + " has shape " +
                      tensor::shape_str(it->second->shape) + ", model expects " +
                      tensor::shape_str(shape));
  }
  return *it->second;
}

}  // namespace

void restore_model(Model& model, const Checkpoint& ckpt) {
  if (!(ckpt.model == model.config())) {
    throw FormatError("checkpoint model config does not match the model");
  }
  const auto idx = index_tensors(ckpt);
  for (const auto& p : model.parameters()) {
    const auto& t = find_tensor(idx, p.name, p.tensor.shape());
    p.tensor.node()->data = t.values;
  }
}

void restore_adam(const Model& model, const Checkpoint& ckpt,
                  AdamState& state) {
  const auto idx = index_tensors(ckpt);
  state = AdamState{};
  if (idx.count("adam.m." + model.parameters().front().name) == 0) return;
  for (const auto& p : model.parameters()) {
    state.m.push_back(find_tensor(idx, "adam.m." + p.name, p.tensor.shape()).values);
  }
  for (const auto& p : model.parameters()) {
    state.v.push_back(find_tensor(idx, "adam.v." + p.name, p.tensor.shape()).values);
  }
  state.step = ckpt.extra.value("adam_step", std::uint64_t{0});
}

}  // namespace ibkt::model
