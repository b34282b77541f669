// Copyright 2026 The ASSD Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "assd/transformer.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>

#include "assd/error.h"

namespace assd {

void TransformerConfig::validate() const {
  require(vocab >= 1, ErrorCode::kInvalidConfig, "transformer vocab must be positive");
  require(seq_len >= 1, ErrorCode::kInvalidConfig, "transformer seq_len must be positive");
  require(d_model >= 1 && layers >= 1 && heads >= 1, ErrorCode::kInvalidConfig,
          "d_model, layers and heads must be positive");
  require(d_model % heads == 0, ErrorCode::kInvalidConfig, "d_model must be divisible by heads");
  require(ffn >= 0, ErrorCode::kInvalidConfig, "ffn must be non-negative");
}

nlohmann::json to_json(const TransformerConfig& cfg) {
  return {{"vocab", cfg.vocab},   {"seq_len", cfg.seq_len}, {"d_model", cfg.d_model},
          {"layers", cfg.layers}, {"heads", cfg.heads},     {"ffn", cfg.ffn_width()}};
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  TransformerConfig cfg;
  cfg.vocab = j.value("vocab", cfg.vocab);
  cfg.seq_len = j.value("seq_len", cfg.seq_len);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.layers = j.value("layers", cfg.layers);
  cfg.heads = j.value("heads", cfg.heads);
  cfg.ffn = j.value("ffn", cfg.ffn);
  return cfg;
}

namespace {

constexpr double kLnEps = 1e-5;

using Vec = std::vector<double>;

// out[r][j] (+)= sum_k x[r][k] * w[k][j]
void matmul(const double* x, int rows, int inner, const double* w, int cols, double* out, bool accumulate) {
  if (!accumulate) std::fill(out, out + static_cast<std::ptrdiff_t>(rows) * cols, 0.0);
  for (int r = 0; r < rows; ++r) {
    double* o = out + static_cast<std::ptrdiff_t>(r) * cols;
    const double* xr = x + static_cast<std::ptrdiff_t>(r) * inner;
    for (int k = 0; k < inner; ++k) {
      const double xv = xr[k];
      const double* wk = w + static_cast<std::ptrdiff_t>(k) * cols;
      for (int j = 0; j < cols; ++j) o[j] += xv * wk[j];
    }
  }
}

// dx[r][k] += sum_j dy[r][j] * w[k][j]
void matmul_dx(const double* dy, int rows, int cols, const double* w, int inner, double* dx) {
  for (int r = 0; r < rows; ++r) {
    const double* d = dy + static_cast<std::ptrdiff_t>(r) * cols;
    double* o = dx + static_cast<std::ptrdiff_t>(r) * inner;
    for (int k = 0; k < inner; ++k) {
      const double* wk = w + static_cast<std::ptrdiff_t>(k) * cols;
      double acc = 0.0;
      for (int j = 0; j < cols; ++j) acc += d[j] * wk[j];
      o[k] += acc;
    }
  }
}

// dw[k][j] += sum_r x[r][k] * dy[r][j]
void matmul_dw(const double* x, int rows, int inner, const double* dy, int cols, double* dw) {
  for (int r = 0; r < rows; ++r) {
    const double* xr = x + static_cast<std::ptrdiff_t>(r) * inner;
    const double* d = dy + static_cast<std::ptrdiff_t>(r) * cols;
    for (int k = 0; k < inner; ++k) {
      const double xv = xr[k];
      double* o = dw + static_cast<std::ptrdiff_t>(k) * cols;
      for (int j = 0; j < cols; ++j) o[j] += xv * d[j];
    }
  }
}

void add_bias(double* out, int rows, int cols, const double* bias) {
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) out[static_cast<std::ptrdiff_t>(r) * cols + j] += bias[j];
  }
}

void bias_grad(const double* dy, int rows, int cols, double* db) {
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) db[j] += dy[static_cast<std::ptrdiff_t>(r) * cols + j];
  }
}

struct LnCache {
  Vec xhat;
  Vec rstd;
};

void layer_norm(const Vec& x, int rows, int d, const double* gain, const double* bias, LnCache& cache, Vec& out) {
  cache.xhat.resize(x.size());
  cache.rstd.resize(static_cast<std::size_t>(rows));
  out.resize(x.size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.data() + static_cast<std::ptrdiff_t>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    cache.rstd[static_cast<std::size_t>(r)] = rstd;
    for (int j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(r) * d + j;
      cache.xhat[idx] = (xr[j] - mean) * rstd;
      out[idx] = gain[j] * cache.xhat[idx] + bias[j];
    }
  }
}

void layer_norm_backward(const Vec& dy, int rows, int d, const double* gain, const LnCache& cache, Vec& dx,
                         double* dgain, double* dbias) {
  Vec dxhat(static_cast<std::size_t>(d));
  for (int r = 0; r < rows; ++r) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (int j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(r) * d + j;
      dgain[j] += dy[idx] * cache.xhat[idx];
      dbias[j] += dy[idx];
      dxhat[static_cast<std::size_t>(j)] = dy[idx] * gain[j];
      mean_d += dxhat[static_cast<std::size_t>(j)];
      mean_dx += dxhat[static_cast<std::size_t>(j)] * cache.xhat[idx];
    }
    mean_d /= d;
    mean_dx /= d;
    const double rstd = cache.rstd[static_cast<std::size_t>(r)];
    for (int j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(r) * d + j;
      dx[idx] += rstd * (dxhat[static_cast<std::size_t>(j)] - mean_d - cache.xhat[idx] * mean_dx);
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
  const double t = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

std::vector<std::vector<int>> allowed_columns(const MaskMatrix& mask) {
  std::vector<std::vector<int>> cols(static_cast<std::size_t>(mask.n()));
  for (int r = 0; r < mask.n(); ++r) {
    for (int c = 0; c < mask.n(); ++c) {
      if (mask(r, c)) cols[static_cast<std::size_t>(r)].push_back(c);
    }
  }
  return cols;
}

// Masked multi-head attention. probs is heads x N x N; rows with no allowed
// key produce zeros.
void attention(const Vec& q, const Vec& k, const Vec& v, const std::vector<std::vector<int>>& allowed, int n, int d,
               int heads, Vec& probs, Vec& out) {
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  probs.assign(static_cast<std::size_t>(heads) * n * n, 0.0);
  out.assign(static_cast<std::size_t>(n) * d, 0.0);
  for (int h = 0; h < heads; ++h) {
    for (int r = 0; r < n; ++r) {
      const auto& cols = allowed[static_cast<std::size_t>(r)];
      if (cols.empty()) continue;
      double* pr = probs.data() + (static_cast<std::ptrdiff_t>(h) * n + r) * n;
      const double* qr = q.data() + static_cast<std::ptrdiff_t>(r) * d + h * dh;
      double max = -std::numeric_limits<double>::infinity();
      for (int c : cols) {
        const double* kc = k.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        double s = 0.0;
        for (int e = 0; e < dh; ++e) s += qr[e] * kc[e];
        pr[c] = s * scale;
        max = std::max(max, pr[c]);
      }
      double sum = 0.0;
      for (int c : cols) {
        pr[c] = std::exp(pr[c] - max);
        sum += pr[c];
      }
      double* orow = out.data() + static_cast<std::ptrdiff_t>(r) * d + h * dh;
      for (int c : cols) {
        pr[c] /= sum;
        const double* vc = v.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        for (int e = 0; e < dh; ++e) orow[e] += pr[c] * vc[e];
      }
    }
  }
}

void attention_backward(const Vec& q, const Vec& k, const Vec& v, const std::vector<std::vector<int>>& allowed, int n,
                        int d, int heads, const Vec& probs, const Vec& dout, Vec& dq, Vec& dk, Vec& dv) {
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Vec dp(static_cast<std::size_t>(n));
  for (int h = 0; h < heads; ++h) {
    for (int r = 0; r < n; ++r) {
      const auto& cols = allowed[static_cast<std::size_t>(r)];
      if (cols.empty()) continue;
      const double* pr = probs.data() + (static_cast<std::ptrdiff_t>(h) * n + r) * n;
      const double* dor = dout.data() + static_cast<std::ptrdiff_t>(r) * d + h * dh;
      double dot = 0.0;
      for (int c : cols) {
        const double* vc = v.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        double* dvc = dv.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        double s = 0.0;
        for (int e = 0; e < dh; ++e) {
          s += dor[e] * vc[e];
          dvc[e] += pr[c] * dor[e];
        }
        dp[static_cast<std::size_t>(c)] = s;
        dot += pr[c] * s;
      }
      const double* qr = q.data() + static_cast<std::ptrdiff_t>(r) * d + h * dh;
      double* dqr = dq.data() + static_cast<std::ptrdiff_t>(r) * d + h * dh;
      for (int c : cols) {
        const double ds = pr[c] * (dp[static_cast<std::size_t>(c)] - dot) * scale;
        const double* kc = k.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        double* dkc = dk.data() + static_cast<std::ptrdiff_t>(c) * d + h * dh;
        for (int e = 0; e < dh; ++e) {
          dqr[e] += ds * kc[e];
          dkc[e] += ds * qr[e];
        }
      }
    }
  }
}

void put_f32_le(std::ostream& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                         static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
  out.write(bytes, 4);
}

float get_f32_le(const unsigned char* bytes) {
  const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                             (static_cast<std::uint32_t>(bytes[2]) << 16) |
                             (static_cast<std::uint32_t>(bytes[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace

struct TwoStreamTransformer::Workspace {
  struct Stream {
    Vec x_in;
    LnCache ln1;
    Vec a;
    Vec q;
    Vec probs;
    Vec att;
    Vec x_mid;
    LnCache ln2;
    Vec a2;
    Vec u;
    Vec act;
  };
  struct Layer {
    Stream content;
    Stream query;
    Vec k;
    Vec v;
    bool content_updated = false;
  };
  std::vector<Layer> layers;
  Vec g_final;
  LnCache lnf;
  Vec f;
  Vec logits;
  std::vector<std::vector<int>> q_allowed;
  std::vector<std::vector<int>> c_allowed;
};

TwoStreamTransformer::TwoStreamTransformer(const TransformerConfig& cfg, Rng& init_rng) : cfg_(cfg) {
  cfg_.validate();
  layout();
  init(init_rng);
}

TwoStreamTransformer::TwoStreamTransformer(const TransformerConfig& cfg, std::vector<double> params) : cfg_(cfg) {
  cfg_.validate();
  layout();
  if (!(params.size() == params_.size()))
    fail(ErrorCode::kInvalidInput, "parameter vector has " + std::to_string(params.size()) + " entries, expected " +
                                       std::to_string(params_.size()));
  params_ = std::move(params);
}

void TwoStreamTransformer::layout() {
  tensors_.clear();
  std::size_t offset = 0;
  const auto add = [&](std::string name, int rows, int cols) {
    tensors_.push_back({std::move(name), offset, rows, cols});
    offset += tensors_.back().size();
  };
  const int d = cfg_.d_model;
  const int f = cfg_.ffn_width();
  add("tok_emb", cfg_.vocab, d);
  add("pos_emb", cfg_.seq_len, d);
  add("query_emb", 1, d);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d);
    add(p + "ln1_b", 1, d);
    add(p + "wq", d, d);
    add(p + "wk", d, d);
    add(p + "wv", d, d);
    add(p + "wo", d, d);
    add(p + "ln2_g", 1, d);
    add(p + "ln2_b", 1, d);
    add(p + "w1", d, f);
    add(p + "b1", 1, f);
    add(p + "w2", f, d);
    add(p + "b2", 1, d);
  }
  add("lnf_g", 1, d);
  add("lnf_b", 1, d);
  add("w_out", d, cfg_.vocab);
  add("b_out", 1, cfg_.vocab);
  params_.assign(offset, 0.0);
}

const TensorSpec& TwoStreamTransformer::tensor(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  fail(ErrorCode::kContractViolation, "no tensor named '" + name + "'");
}

void TwoStreamTransformer::init(Rng& rng) {
  for (const auto& t : tensors_) {
    const std::string_view name = std::string_view(t.name).substr(t.name.find('.') + 1);
    double stddev = 0.0;
    double fill = 0.0;
    if (name == "tok_emb" || name == "pos_emb" || name == "query_emb") {
      stddev = 0.5;
    } else if (name.ends_with("_g")) {
      fill = 1.0;
    } else if (name.starts_with("w")) {
      stddev = 1.0 / std::sqrt(static_cast<double>(t.rows));
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      params_[t.offset + i] = stddev > 0.0 ? stddev * rng.normal() : fill;
    }
  }
}

void TwoStreamTransformer::run_forward(const TokenSequence& seq, const MaskMatrix& qmask, const MaskMatrix& cmask,
                                       Workspace& ws) const {
  const int n = cfg_.seq_len;
  const int d = cfg_.d_model;
  const int f = cfg_.ffn_width();
  const int heads = cfg_.heads;
  if (!(seq.n() == n && qmask.n() == n && cmask.n() == n))
    fail(ErrorCode::kContractViolation, "input/mask length does not match seq_len " + std::to_string(n));
  require(seq.vocab() == cfg_.vocab, ErrorCode::kContractViolation, "vocabulary mismatch");
  const double* P = params_.data();
  const auto off = [&](const std::string& name) { return P + tensor(name).offset; };

  ws.q_allowed = allowed_columns(qmask);
  ws.c_allowed = allowed_columns(cmask);
  ws.layers.assign(static_cast<std::size_t>(cfg_.layers), {});

  Vec h(static_cast<std::size_t>(n) * d);
  Vec g(static_cast<std::size_t>(n) * d);
  const double* tok = off("tok_emb");
  const double* pos = off("pos_emb");
  const double* qemb = off("query_emb");
  for (int p = 0; p < n; ++p) {
    for (int j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(p) * d + j;
      const double pe = pos[idx];
      h[idx] = pe + (seq.is_mask(p) ? 0.0 : tok[static_cast<std::size_t>(seq[p]) * d + j]);
      g[idx] = pe + qemb[j];
    }
  }

  for (int l = 0; l < cfg_.layers; ++l) {
    auto& L = ws.layers[static_cast<std::size_t>(l)];
    const std::string pre = "l" + std::to_string(l) + ".";
    const double* ln1_g = off(pre + "ln1_g");
    const double* ln1_b = off(pre + "ln1_b");
    const double* wq = off(pre + "wq");
    const double* wk = off(pre + "wk");
    const double* wv = off(pre + "wv");
    const double* wo = off(pre + "wo");
    const double* ln2_g = off(pre + "ln2_g");
    const double* ln2_b = off(pre + "ln2_b");
    const double* w1 = off(pre + "w1");
    const double* b1 = off(pre + "b1");
    const double* w2 = off(pre + "w2");
    const double* b2 = off(pre + "b2");

    L.content.x_in = h;
    layer_norm(h, n, d, ln1_g, ln1_b, L.content.ln1, L.content.a);
    L.k.resize(h.size());
    L.v.resize(h.size());
    matmul(L.content.a.data(), n, d, wk, d, L.k.data(), false);
    matmul(L.content.a.data(), n, d, wv, d, L.v.data(), false);

    const auto stream_block = [&](Workspace::Stream& s, const std::vector<std::vector<int>>& allowed,
                                  bool reuse_normalized, Vec& x) {
      if (!reuse_normalized) {
        s.x_in = x;
        layer_norm(x, n, d, ln1_g, ln1_b, s.ln1, s.a);
      }
      s.q.resize(x.size());
      matmul(s.a.data(), n, d, wq, d, s.q.data(), false);
      attention(s.q, L.k, L.v, allowed, n, d, heads, s.probs, s.att);
      s.x_mid = x;
      matmul(s.att.data(), n, d, wo, d, s.x_mid.data(), true);
      layer_norm(s.x_mid, n, d, ln2_g, ln2_b, s.ln2, s.a2);
      s.u.resize(static_cast<std::size_t>(n) * f);
      matmul(s.a2.data(), n, d, w1, f, s.u.data(), false);
      add_bias(s.u.data(), n, f, b1);
      s.act.resize(s.u.size());
      for (std::size_t i = 0; i < s.u.size(); ++i) s.act[i] = gelu(s.u[i]);
      x = s.x_mid;
      matmul(s.act.data(), n, f, w2, d, x.data(), true);
      add_bias(x.data(), n, d, b2);
    };

    // Query stream first: it reads this layer's content keys and values.
    stream_block(L.query, ws.q_allowed, false, g);
    // The final content update feeds nothing.
    L.content_updated = l + 1 < cfg_.layers;
    if (L.content_updated) stream_block(L.content, ws.c_allowed, true, h);
  }

  ws.g_final = g;
  Vec dummy;
  layer_norm(g, n, d, off("lnf_g"), off("lnf_b"), ws.lnf, ws.f);
  ws.logits.resize(static_cast<std::size_t>(n) * cfg_.vocab);
  matmul(ws.f.data(), n, d, off("w_out"), cfg_.vocab, ws.logits.data(), false);
  add_bias(ws.logits.data(), n, cfg_.vocab, off("b_out"));
}

void TwoStreamTransformer::run_backward(const TokenSequence& seq, const MaskMatrix& qmask, const MaskMatrix& cmask,
                                        Workspace& ws, std::span<const double> dlogits, std::span<double> grad) const {
  (void)qmask;
  (void)cmask;
  const int n = cfg_.seq_len;
  const int d = cfg_.d_model;
  const int f = cfg_.ffn_width();
  const int heads = cfg_.heads;
  const int vocab = cfg_.vocab;
  const double* P = params_.data();
  double* G = grad.data();
  const auto off = [&](const std::string& name) { return tensor(name).offset; };

  const std::size_t w_out = off("w_out");
  bias_grad(dlogits.data(), n, vocab, G + off("b_out"));
  matmul_dw(ws.f.data(), n, d, dlogits.data(), vocab, G + w_out);
  Vec df(static_cast<std::size_t>(n) * d, 0.0);
  matmul_dx(dlogits.data(), n, vocab, P + w_out, d, df.data());
  Vec dg(static_cast<std::size_t>(n) * d, 0.0);
  layer_norm_backward(df, n, d, P + off("lnf_g"), ws.lnf, dg, G + off("lnf_g"), G + off("lnf_b"));
  Vec dh(static_cast<std::size_t>(n) * d, 0.0);

  for (int l = cfg_.layers - 1; l >= 0; --l) {
    auto& L = ws.layers[static_cast<std::size_t>(l)];
    const std::string pre = "l" + std::to_string(l) + ".";
    const std::size_t o_ln1_g = off(pre + "ln1_g"), o_ln1_b = off(pre + "ln1_b");
    const std::size_t o_wq = off(pre + "wq"), o_wk = off(pre + "wk"), o_wv = off(pre + "wv"), o_wo = off(pre + "wo");
    const std::size_t o_ln2_g = off(pre + "ln2_g"), o_ln2_b = off(pre + "ln2_b");
    const std::size_t o_w1 = off(pre + "w1"), o_b1 = off(pre + "b1"), o_w2 = off(pre + "w2"), o_b2 = off(pre + "b2");

    Vec dk(static_cast<std::size_t>(n) * d, 0.0);
    Vec dv(static_cast<std::size_t>(n) * d, 0.0);

    // Backward through one stream block; returns d(normalized input).
    const auto block_backward = [&](Workspace::Stream& s, const std::vector<std::vector<int>>& allowed,
                                    Vec& dx) -> Vec {
      bias_grad(dx.data(), n, d, G + o_b2);
      matmul_dw(s.act.data(), n, f, dx.data(), d, G + o_w2);
      Vec du(static_cast<std::size_t>(n) * f, 0.0);
      matmul_dx(dx.data(), n, d, P + o_w2, f, du.data());
      for (std::size_t i = 0; i < du.size(); ++i) du[i] *= gelu_grad(s.u[i]);
      bias_grad(du.data(), n, f, G + o_b1);
      matmul_dw(s.a2.data(), n, d, du.data(), f, G + o_w1);
      Vec da2(static_cast<std::size_t>(n) * d, 0.0);
      matmul_dx(du.data(), n, f, P + o_w1, d, da2.data());
      // dx now holds d(x_mid): residual path plus the LN2 branch.
      layer_norm_backward(da2, n, d, P + o_ln2_g, s.ln2, dx, G + o_ln2_g, G + o_ln2_b);
      matmul_dw(s.att.data(), n, d, dx.data(), d, G + o_wo);
      Vec datt(static_cast<std::size_t>(n) * d, 0.0);
      matmul_dx(dx.data(), n, d, P + o_wo, d, datt.data());
      Vec dq(static_cast<std::size_t>(n) * d, 0.0);
      attention_backward(s.q, L.k, L.v, allowed, n, d, heads, s.probs, datt, dq, dk, dv);
      matmul_dw(s.a.data(), n, d, dq.data(), d, G + o_wq);
      Vec da(static_cast<std::size_t>(n) * d, 0.0);
      matmul_dx(dq.data(), n, d, P + o_wq, d, da.data());
      return da;
    };

    Vec dqa = block_backward(L.query, ws.q_allowed, dg);
    layer_norm_backward(dqa, n, d, P + o_ln1_g, L.query.ln1, dg, G + o_ln1_g, G + o_ln1_b);

    Vec dca(static_cast<std::size_t>(n) * d, 0.0);
    if (L.content_updated) dca = block_backward(L.content, ws.c_allowed, dh);
    matmul_dw(L.content.a.data(), n, d, dk.data(), d, G + o_wk);
    matmul_dw(L.content.a.data(), n, d, dv.data(), d, G + o_wv);
    matmul_dx(dk.data(), n, d, P + o_wk, d, dca.data());
    matmul_dx(dv.data(), n, d, P + o_wv, d, dca.data());
    layer_norm_backward(dca, n, d, P + o_ln1_g, L.content.ln1, dh, G + o_ln1_g, G + o_ln1_b);
  }

  double* dtok = G + off("tok_emb");
  double* dpos = G + off("pos_emb");
  double* dqemb = G + off("query_emb");
  for (int p = 0; p < n; ++p) {
    for (int j = 0; j < d; ++j) {
      const auto idx = static_cast<std::size_t>(p) * d + j;
      dpos[idx] += dh[idx] + dg[idx];
      dqemb[j] += dg[idx];
      if (!seq.is_mask(p)) dtok[static_cast<std::size_t>(seq[p]) * d + j] += dh[idx];
    }
  }
}

Logits TwoStreamTransformer::forward(const TokenSequence& seq, const MaskMatrix& query_mask,
                                     const MaskMatrix& content_mask) const {
  Workspace ws;
  run_forward(seq, query_mask, content_mask, ws);
  return {cfg_.seq_len, cfg_.vocab, std::move(ws.logits)};
}

Logits TwoStreamTransformer::forward(const TokenSequence& seq, const Ordering& ord) const {
  require(ord.n() == cfg_.seq_len, ErrorCode::kContractViolation, "ordering length mismatch");
  return forward(seq, build_query_mask(ord), build_content_mask(ord));
}

namespace {

double log_softmax_at(std::span<const double> row, int target) {
  const double max = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double x : row) sum += std::exp(x - max);
  return row[static_cast<std::size_t>(target)] - max - std::log(sum);
}

void check_teacher_forced(const TokenSequence& chunk) {
  require(chunk.mask_count() == 0, ErrorCode::kContractViolation, "teacher forcing needs a fully observed chunk");
}

}  // namespace

double TwoStreamTransformer::joint_nll(const TokenSequence& chunk, const Ordering& ord) const {
  check_teacher_forced(chunk);
  const Logits logits = forward(chunk, ord);
  double nll = 0.0;
  for (int i = ord.m(); i < ord.n(); ++i) nll -= log_softmax_at(logits.row(ord[i]), chunk[ord[i]]);
  return nll;
}

double TwoStreamTransformer::loss_and_gradient(const TokenSequence& chunk, const Ordering& ord, double scale,
                                               std::span<double> grad) const {
  check_teacher_forced(chunk);
  require(grad.size() == params_.size(), ErrorCode::kContractViolation, "gradient buffer size mismatch");
  require(ord.n() == cfg_.seq_len, ErrorCode::kContractViolation, "ordering length mismatch");
  const MaskMatrix qmask = build_query_mask(ord);
  const MaskMatrix cmask = build_content_mask(ord);
  Workspace ws;
  run_forward(chunk, qmask, cmask, ws);
  const int vocab = cfg_.vocab;
  Vec dlogits(ws.logits.size(), 0.0);
  double nll = 0.0;
  for (int i = ord.m(); i < ord.n(); ++i) {
    const int pos = ord[i];
    const auto row = std::span<const double>(ws.logits).subspan(static_cast<std::size_t>(pos) * vocab,
                                                                static_cast<std::size_t>(vocab));
    const double max = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - max);
    const int target = chunk[pos];
    nll -= row[static_cast<std::size_t>(target)] - max - std::log(sum);
    for (int v = 0; v < vocab; ++v) {
      const double prob = std::exp(row[static_cast<std::size_t>(v)] - max) / sum;
      dlogits[static_cast<std::size_t>(pos) * vocab + v] = scale * (prob - (v == target ? 1.0 : 0.0));
    }
  }
  if (ord.m() < ord.n()) run_backward(chunk, qmask, cmask, ws, dlogits, grad);
  return nll;
}

std::vector<ProbVector> TwoStreamTransformer::do_marginals(const TokenSequence& seq, const Ordering& ord, int n,
                                                           std::span<const int> queries) const {
  // Every query row sees exactly sigma(<n); content rows keep the ordering's
  // content mask so visible representations match the chained pass.
  MaskMatrix qmask(ord.n());
  for (int r = 0; r < ord.n(); ++r) {
    for (int j = 0; j < n; ++j) qmask.set(r, ord[j], true);
  }
  const Logits logits = forward(seq, qmask, build_content_mask(ord));
  std::vector<ProbVector> out;
  out.reserve(queries.size());
  for (int q : queries) out.push_back(ProbVector::from_logits(logits.row(q)));
  return out;
}

std::vector<ProbVector> TwoStreamTransformer::do_chained(const TokenSequence& seq, const Ordering& ord, int n,
                                                         int t) const {
  const Logits logits = forward(seq, ord);
  std::vector<ProbVector> out;
  out.reserve(static_cast<std::size_t>(t - n));
  for (int i = n; i < t; ++i) out.push_back(ProbVector::from_logits(logits.row(ord[i])));
  return out;
}

void TwoStreamTransformer::save(const std::string& prefix, const nlohmann::json& metadata) const {
  {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!(bin.good())) fail(ErrorCode::kIo, "cannot write '" + prefix + ".bin'");
    for (double x : params_) put_f32_le(bin, static_cast<float>(x));
    if (!(bin.good())) fail(ErrorCode::kIo, "short write to '" + prefix + ".bin'");
  }
  nlohmann::json sidecar;
  sidecar["format"] = "assd-two-stream-v1";
  sidecar["dtype"] = "float32-le";
  sidecar["config"] = to_json(cfg_);
  sidecar["parameter_count"] = params_.size();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : tensors_) {
    tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"shape", {t.rows, t.cols}}});
  }
  sidecar["tensors"] = std::move(tensors);
  sidecar["metadata"] = metadata;
  std::ofstream js(prefix + ".json");
  if (!(js.good())) fail(ErrorCode::kIo, "cannot write '" + prefix + ".json'");
  js << sidecar.dump(2) << "\n";
}

TwoStreamTransformer TwoStreamTransformer::load(const std::string& prefix, nlohmann::json* metadata) {
  std::ifstream js(prefix + ".json");
  if (!(js.good())) fail(ErrorCode::kIo, "cannot open checkpoint sidecar '" + prefix + ".json'");
  nlohmann::json sidecar;
  try {
    js >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidInput, "'" + prefix + ".json': " + e.what());
  }
  require(sidecar.value("format", std::string()) == "assd-two-stream-v1", ErrorCode::kInvalidInput,
          "unknown checkpoint format");
  const TransformerConfig cfg = transformer_config_from_json(sidecar.at("config"));
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!(bin.good())) fail(ErrorCode::kIo, "cannot open checkpoint weights '" + prefix + ".bin'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t count = sidecar.at("parameter_count").get<std::size_t>();
  require(bytes.size() == count * 4, ErrorCode::kInvalidInput, "weight file size does not match the sidecar");
  std::vector<double> params(count);
  for (std::size_t i = 0; i < count; ++i) params[i] = get_f32_le(bytes.data() + 4 * i);
  TwoStreamTransformer model(cfg, std::move(params));
  const auto& tensors = sidecar.at("tensors");
  require(tensors.size() == model.tensors().size(), ErrorCode::kInvalidInput, "tensor table mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& spec = model.tensors()[i];
    if (!(tensors[i].at("name") == spec.name && tensors[i].at("offset").get<std::size_t>() == spec.offset))
      fail(ErrorCode::kInvalidInput, "tensor '" + spec.name + "' does not match the sidecar");
  }
  if (metadata != nullptr) *metadata = sidecar.value("metadata", nlohmann::json::object());
  return model;
}

}  // namespace assd
