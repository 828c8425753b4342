// Copyright 2026 The sdbev Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sdbev/autodiff.hpp"
#include "sdbev/labels.hpp"
#include "sdbev/rng.hpp"
#include "sdbev/serialize.hpp"
#include "sdbev/tensor.hpp"

namespace sdbev {

struct ModelConfig {
  int feat_channels = 16;   // C, backbone output width
  int decoder_layers = 6;
  int decoder_heads = 4;
  int embed_dim = 24;       // d
  int ffn_dim = 48;
  int n_det_queries = 90;
  int n_bev_queries = 100;  // must be a square, one query per BEV grid cell
  int bev_patch = 4;        // s: output pixels per BEV query side
  int n_classes = 3;
  int n_attributes = 2;
  int semantic_channels = 3;  // C_s, must match LabelConfig::semantic_channels()
  int depth_bins = 32;        // C_d
  int n_views = 6;
  int feat_h = 4, feat_w = 11;  // H_I/16, W_I/16
  double range = 20.0, z_range = 3.0;
  Task task = Task::detection;
  bool seg_branch = true, depth_branch = true, pqb = true;

  bool has_det_head() const { return task != Task::bev_segmentation; }
  bool has_bev_head() const { return task != Task::detection; }
  int bev_grid() const { return static_cast<int>(std::lround(std::sqrt(double(n_bev_queries)))); }
  int bev_side() const { return bev_grid() * bev_patch; }

  void validate() const {
    if (decoder_layers < 1) throw std::invalid_argument("model: decoder_layers must be >= 1");
    if (embed_dim % decoder_heads != 0)
      throw std::invalid_argument("model: embed_dim not divisible by decoder_heads");
    if (pqb && !seg_branch)
      throw std::invalid_argument("model: pqb requires the segmentation branch");
    if (pqb) {
      if (has_det_head() && n_det_queries % semantic_channels != 0)
        throw std::invalid_argument("model: n_det_queries not divisible by semantic_channels");
      if (has_bev_head() && n_bev_queries % semantic_channels != 0)
        throw std::invalid_argument("model: n_bev_queries not divisible by semantic_channels");
    }
    if (has_bev_head()) {
      const int g = bev_grid();
      if (g * g != n_bev_queries)
        throw std::invalid_argument("model: n_bev_queries must be a perfect square");
    }
  }
};

struct ModelState {
  std::map<std::string, Tensor> params;  // ordered; iteration order is the contract

  Tensor& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model state: missing param " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::out_of_range("model state: missing param " + name);
    return it->second;
  }
};

namespace model_detail {

inline void init_conv(ModelState& st, Rng& rng, const std::string& name, int co, int ci, int k) {
  Tensor w({co, ci, k, k});
  const double std = std::sqrt(2.0 / (ci * k * k));
  for (auto& e : w.v) e = rng.normal(0.0, std);
  st.params[name + ".w"] = std::move(w);
  st.params[name + ".b"] = Tensor::zeros({co});
}

inline void init_linear(ModelState& st, Rng& rng, const std::string& name, int in, int out,
                        double out_scale = 1.0, double bias_init = 0.0) {
  Tensor w({in, out});
  const double std = std::sqrt(2.0 / in) * out_scale;
  for (auto& e : w.v) e = rng.normal(0.0, std);
  st.params[name + ".w"] = std::move(w);
  st.params[name + ".b"] = Tensor::full({out}, bias_init);
}

inline void init_res_unit(ModelState& st, Rng& rng, const std::string& name, int c) {
  init_conv(st, rng, name + ".conv1", c, c, 3);
  init_conv(st, rng, name + ".conv2", c, c, 3);
}

inline void init_embedding(ModelState& st, Rng& rng, const std::string& name, int n, int d,
                           double std) {
  Tensor t({n, d});
  for (auto& e : t.v) e = rng.normal(0.0, std);
  st.params[name] = std::move(t);
}

/// Writes sin/cos of the angle at two frequencies into the first four dims.
/// Queries and view embeddings share this layout, which gives cross-attention
/// an initial azimuth-to-view routing signal.
inline void write_angle_code(Tensor& t, int row, double angle, double amplitude) {
  if (t.dim(1) < 4) return;
  t.at(row, 0) = amplitude * std::sin(angle);
  t.at(row, 1) = amplitude * std::cos(angle);
  t.at(row, 2) = amplitude * std::sin(2.0 * angle);
  t.at(row, 3) = amplitude * std::cos(2.0 * angle);
}

inline void init_linear_near_identity(ModelState& st, Rng& rng, const std::string& name, int d) {
  Tensor w({d, d});
  for (auto& e : w.v) e = rng.normal(0.0, 0.05);
  for (int i = 0; i < d; ++i) w.at(i, i) += 1.0;
  st.params[name + ".w"] = std::move(w);
  st.params[name + ".b"] = Tensor::zeros({d});
}

}  // namespace model_detail

inline ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  using namespace model_detail;
  cfg.validate();
  ModelState st;
  Rng rng(Rng::mix(seed, 0x40de1));
  const int C = cfg.feat_channels, d = cfg.embed_dim;
  const int c_half = std::max(4, C / 2);

  init_conv(st, rng, "backbone.stem1", c_half, 3, 3);
  init_conv(st, rng, "backbone.stem2", c_half, c_half, 3);
  init_conv(st, rng, "backbone.stem3", C, c_half, 3);
  init_conv(st, rng, "backbone.stem4", C, C, 3);
  init_res_unit(st, rng, "backbone.res4", C);
  init_res_unit(st, rng, "backbone.res5", C);

  init_res_unit(st, rng, "sd.seg.res", C);
  init_conv(st, rng, "sd.seg.proj", cfg.semantic_channels, C, 1);
  init_res_unit(st, rng, "sd.dep.res1", C);
  init_conv(st, rng, "sd.dep.dcl1", C, C, 3);
  init_res_unit(st, rng, "sd.dep.res2", C);
  init_conv(st, rng, "sd.dep.dcl2", C, C, 3);
  init_res_unit(st, rng, "sd.dep.res3", C);
  init_conv(st, rng, "sd.dep.proj", cfg.depth_bins, C, 1);

  st.params["pqb.s_w"] = Tensor::full({cfg.semantic_channels}, 1.0);
  init_embedding(st, rng, "query.det", cfg.n_det_queries, d, 0.2);
  init_embedding(st, rng, "query.bev", cfg.n_bev_queries, d, 0.2);
  // Detection queries start with the azimuth code of their grid anchor; BEV
  // queries with their cell azimuth. Matching codes in the view embeddings
  // let cross-attention route queries to the right camera from step one.
  {
    Tensor& qdet = st.params["query.det"];
    const int side = static_cast<int>(std::ceil(std::sqrt(double(cfg.n_det_queries))));
    for (int q = 0; q < cfg.n_det_queries; ++q) {
      const int gy = q / side, gx = q % side;
      const double ux = 0.1 + 0.8 * (gx + 0.5) / side - 0.5;
      const double uy = 0.1 + 0.8 * (gy + 0.5) / side - 0.5;
      write_angle_code(qdet, q, std::atan2(uy, ux), 1.0);
    }
    Tensor& qbev = st.params["query.bev"];
    const int g = cfg.bev_grid();
    for (int q = 0; q < cfg.n_bev_queries; ++q) {
      const double ux = (q % g + 0.5) / g - 0.5;
      const double uy = (q / g + 0.5) / g - 0.5;
      write_angle_code(qbev, q, std::atan2(uy, ux), 1.0);
    }
  }

  init_linear(st, rng, "decoder.feat_proj", C, d);
  init_embedding(st, rng, "decoder.view_emb", cfg.n_views, d, 0.2);
  init_embedding(st, rng, "decoder.pos_emb", cfg.feat_h * cfg.feat_w, d, 0.2);
  for (int v = 0; v < cfg.n_views; ++v)
    write_angle_code(st.params["decoder.view_emb"], v, 2.0 * M_PI * v / cfg.n_views, 1.0);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string L = "decoder.layer" + std::to_string(i);
    for (const char* blk : {".self", ".cross"}) {
      init_linear_near_identity(st, rng, L + blk + ".q", d);
      init_linear_near_identity(st, rng, L + blk + ".k", d);
      init_linear(st, rng, L + blk + ".v", d, d);
      init_linear(st, rng, L + blk + ".o", d, d);
    }
    for (const char* ln : {".ln1", ".ln2", ".ln3"}) {
      st.params[L + ln + ".g"] = Tensor::full({d}, 1.0);
      st.params[L + ln + ".b"] = Tensor::zeros({d});
    }
    init_linear(st, rng, L + ".ffn.fc1", d, cfg.ffn_dim);
    init_linear(st, rng, L + ".ffn.fc2", cfg.ffn_dim, d);
  }

  init_linear(st, rng, "head.det.cls.fc1", d, d);
  // Low-confidence classification start keeps the focal loss well-scaled.
  init_linear(st, rng, "head.det.cls.fc2", d, cfg.n_classes, 0.1, -3.0);
  init_linear(st, rng, "head.det.reg.fc1", d, d);
  init_linear(st, rng, "head.det.reg.fc2", d, 10, 0.1);
  // Per-query regression anchors: initial box centers spread over the BEV
  // range on a grid, so matching is spatially stable from the first step.
  {
    Tensor anchor({cfg.n_det_queries, 10});
    const int side = static_cast<int>(std::ceil(std::sqrt(double(cfg.n_det_queries))));
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    for (int q = 0; q < cfg.n_det_queries; ++q) {
      const int gy = q / side, gx = q % side;
      const double ux = 0.1 + 0.8 * (gx + 0.5) / side;
      const double uy = 0.1 + 0.8 * (gy + 0.5) / side;
      anchor.at(q, 0) = logit(ux);
      anchor.at(q, 1) = logit(uy);
    }
    st.params["head.det.reg.anchor"] = std::move(anchor);
  }
  init_linear(st, rng, "head.det.attr", d, cfg.n_attributes, 0.1);
  init_linear(st, rng, "head.bev.fc1", d, 2 * d);
  init_linear(st, rng, "head.bev.fc2", 2 * d, cfg.bev_patch * cfg.bev_patch * (cfg.n_classes + 1),
              0.1);
  return st;
}

/// Per-forward parameter bindings: one autodiff leaf per parameter tensor.
/// Each concurrent forward gets its own workspace; gradients are read back
/// from the leaves after backward().
struct Workspace {
  std::map<std::string, ad::Var> bound;

  static Workspace bind(const ModelState& st) {
    Workspace ws;
    for (const auto& [name, tensor] : st.params) ws.bound[name] = ad::leaf(tensor);
    return ws;
  }

  const ad::Var& p(const std::string& name) const {
    auto it = bound.find(name);
    if (it == bound.end()) throw std::out_of_range("workspace: missing param " + name);
    return it->second;
  }

  /// Accumulated gradients, zero tensors for untouched params.
  std::map<std::string, Tensor> grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, var] : bound)
      out[name] = var->grad.v.empty() ? Tensor::zeros(var->val.shape) : var->grad;
    return out;
  }
};

namespace model_detail {

/// Pre-activation residual unit: x + conv2(act(conv1(act(x)))).
inline ad::Var res_unit(const ad::Var& x, const Workspace& ws, const std::string& name) {
  ad::Var h = ad::silu(x);
  h = ad::conv2d(h, ws.p(name + ".conv1.w"), ws.p(name + ".conv1.b"), 1, 1);
  h = ad::silu(h);
  h = ad::conv2d(h, ws.p(name + ".conv2.w"), ws.p(name + ".conv2.b"), 1, 1);
  return ad::add(x, h);
}

}  // namespace model_detail

struct BackboneOut {
  ad::Var f4, f5;  // both [N, C, H/16, W/16]
};

/// Small strided conv stack with two stride-16 stages.
inline BackboneOut backbone_forward(const ad::Var& images, const Workspace& ws,
                                    const ModelConfig& cfg) {
  if (images->val.rank() != 4 || images->val.dim(2) % 16 != 0 || images->val.dim(3) % 16 != 0)
    throw std::invalid_argument("backbone: image size must be divisible by 16");
  ad::Var x = images;
  x = ad::silu(ad::conv2d(x, ws.p("backbone.stem1.w"), ws.p("backbone.stem1.b"), 2, 1));
  x = ad::silu(ad::conv2d(x, ws.p("backbone.stem2.w"), ws.p("backbone.stem2.b"), 2, 1));
  x = ad::silu(ad::conv2d(x, ws.p("backbone.stem3.w"), ws.p("backbone.stem3.b"), 2, 1));
  x = ad::silu(ad::conv2d(x, ws.p("backbone.stem4.w"), ws.p("backbone.stem4.b"), 2, 1));
  BackboneOut out;
  out.f4 = model_detail::res_unit(x, ws, "backbone.res4");
  out.f5 = model_detail::res_unit(out.f4, ws, "backbone.res5");
  (void)cfg;
  return out;
}

struct SdOut {
  ad::Var seg_logits, p_seg;  // [N, C_s, h, w]
  ad::Var dep_logits, p_dep;  // [N, C_d, h, w]
};

/// Two-branch encoder: one residual unit for segmentation, three residual
/// units interleaved with dilated convolutions for depth. Both branches end
/// in a 1x1 projection and a sigmoid.
inline SdOut sd_encoder_forward(const ad::Var& f5, const Workspace& ws, const ModelConfig& cfg,
                                bool want_seg = true, bool want_dep = true) {
  SdOut out;
  if (want_seg) {
    ad::Var s = model_detail::res_unit(f5, ws, "sd.seg.res");
    out.seg_logits = ad::conv2d(s, ws.p("sd.seg.proj.w"), ws.p("sd.seg.proj.b"), 1, 0);
    out.p_seg = ad::sigmoid(out.seg_logits);
  }
  if (want_dep) {
    ad::Var t = model_detail::res_unit(f5, ws, "sd.dep.res1");
    t = ad::silu(ad::conv2d(t, ws.p("sd.dep.dcl1.w"), ws.p("sd.dep.dcl1.b"), 1, 1, 1));
    t = model_detail::res_unit(t, ws, "sd.dep.res2");
    t = ad::silu(ad::conv2d(t, ws.p("sd.dep.dcl2.w"), ws.p("sd.dep.dcl2.b"), 1, 2, 2));
    t = model_detail::res_unit(t, ws, "sd.dep.res3");
    out.dep_logits = ad::conv2d(t, ws.p("sd.dep.proj.w"), ws.p("sd.dep.proj.b"), 1, 0);
    out.p_dep = ad::sigmoid(out.dep_logits);
  }
  (void)cfg;
  return out;
}

struct PqbOut {
  ad::Var q1;   // [N_q, d]
  ad::Var s_p;  // [N_q]
};

/// Prior-guided query builder: pool the class-grouped segmentation map to
/// N_q/C_s chunks per class, weight by the class-specific vector, flatten in
/// class order, and add the resulting per-query scalar onto the query table.
inline PqbOut pqb_forward(const ad::Var& p_seg, const ad::Var& s_w, const ad::Var& q0) {
  const int cs = p_seg->val.dim(1);
  const int n_q = q0->val.dim(0);
  if (n_q % cs != 0)
    throw std::invalid_argument("pqb: query count " + std::to_string(n_q) +
                                " not divisible by semantic channels " + std::to_string(cs));
  ad::Var grouped = ad::regroup_class_major(p_seg);               // [C_s, N*h*w]
  ad::Var pooled = ad::adaptive_avg_pool_rows(grouped, n_q / cs); // [C_s, N_q/C_s]
  ad::Var weighted = ad::rowwise_scale(pooled, s_w);
  PqbOut out;
  out.s_p = ad::reshape(weighted, {n_q});
  out.q1 = ad::rowwise_shift(q0, out.s_p);
  return out;
}

/// Copies of the row-softmax attention matrices, captured for tests.
struct AttnProbe {
  std::vector<Tensor> maps;
};

namespace model_detail {

inline ad::Var multi_head_attention(const ad::Var& q_in, const ad::Var& k_in, const ad::Var& v_in,
                                    const Workspace& ws, const std::string& prefix, int heads,
                                    AttnProbe* probe) {
  const int d = q_in->val.dim(1);
  const int dh = d / heads;
  ad::Var q = ad::linear(q_in, ws.p(prefix + ".q.w"), ws.p(prefix + ".q.b"));
  ad::Var k = ad::linear(k_in, ws.p(prefix + ".k.w"), ws.p(prefix + ".k.b"));
  ad::Var v = ad::linear(v_in, ws.p(prefix + ".v.w"), ws.p(prefix + ".v.b"));
  std::vector<ad::Var> head_outs;
  for (int hh = 0; hh < heads; ++hh) {
    ad::Var qh = ad::slice_cols(q, hh * dh, (hh + 1) * dh);
    ad::Var kh = ad::slice_cols(k, hh * dh, (hh + 1) * dh);
    ad::Var vh = ad::slice_cols(v, hh * dh, (hh + 1) * dh);
    ad::Var scores = ad::scalar_mul(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(dh)));
    ad::Var attn = ad::softmax_rows(scores);
    if (probe) probe->maps.push_back(attn->val);
    head_outs.push_back(ad::matmul(attn, vh));
  }
  ad::Var cat = head_outs.size() == 1 ? head_outs[0] : ad::concat_cols(head_outs);
  return ad::linear(cat, ws.p(prefix + ".o.w"), ws.p(prefix + ".o.b"));
}

}  // namespace model_detail

/// Decoder over an explicit token set. tokens_d are the projected image
/// features, pe the positional encodings added to the cross-attention keys.
/// The query embedding q1 seeds the content stream and is re-added to the
/// attention queries/keys at every layer so per-query identity survives the
/// residual stack.
inline std::vector<ad::Var> decoder_forward_tokens(const ad::Var& q1, const ad::Var& tokens_d,
                                                   const ad::Var& pe, const Workspace& ws,
                                                   const ModelConfig& cfg,
                                                   AttnProbe* probe = nullptr) {
  std::vector<ad::Var> states;
  ad::Var x = q1;
  ad::Var keys = ad::add(tokens_d, pe);
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    // Pre-norm sublayers: the residual stream is an identity path, so the
    // per-query embedding is never normalized away.
    const std::string L = "decoder.layer" + std::to_string(i);
    ad::Var t1 = ad::layer_norm(x, ws.p(L + ".ln1.g"), ws.p(L + ".ln1.b"));
    ad::Var qk = ad::add(t1, q1);
    x = ad::add(x, model_detail::multi_head_attention(qk, qk, t1, ws, L + ".self",
                                                      cfg.decoder_heads, probe));
    ad::Var t2 = ad::layer_norm(x, ws.p(L + ".ln2.g"), ws.p(L + ".ln2.b"));
    x = ad::add(x, model_detail::multi_head_attention(ad::add(t2, q1), keys, tokens_d, ws,
                                                      L + ".cross", cfg.decoder_heads, probe));
    ad::Var t3 = ad::layer_norm(x, ws.p(L + ".ln3.g"), ws.p(L + ".ln3.b"));
    ad::Var h = ad::silu(ad::linear(t3, ws.p(L + ".ffn.fc1.w"), ws.p(L + ".ffn.fc1.b")));
    x = ad::add(x, ad::linear(h, ws.p(L + ".ffn.fc2.w"), ws.p(L + ".ffn.fc2.b")));
    states.push_back(x);
  }
  return states;
}

/// Standard entry: flattens multi-view features into tokens, attaches learned
/// view + 2D positional encodings, runs the layer stack.
inline std::vector<ad::Var> decoder_forward(const ad::Var& q1, const ad::Var& f4,
                                            const Workspace& ws, const ModelConfig& cfg,
                                            AttnProbe* probe = nullptr) {
  ad::Var tokens = ad::nchw_to_tokens(f4);  // [N*h*w, C]
  ad::Var tokens_d = ad::linear(tokens, ws.p("decoder.feat_proj.w"), ws.p("decoder.feat_proj.b"));
  ad::Var pe = ad::build_pe(ws.p("decoder.view_emb"), ws.p("decoder.pos_emb"));
  return decoder_forward_tokens(q1, tokens_d, pe, ws, cfg, probe);
}

struct DetOut {
  std::vector<ad::Var> cls_logits;   // per layer, [N_q, C_cls]
  std::vector<ad::Var> boxes;        // per layer, [N_q, 10] decoded
  std::vector<ad::Var> attr_logits;  // per layer, [N_q, A]
};

/// Decode raw regression into the 10-dim box parameterization
/// (x, y, z, w, l, h, sin yaw, cos yaw, vx, vy). Centers are sigmoid-mapped
/// into the perception range, sizes exponentiated.
inline ad::Var decode_box_regression(const ad::Var& raw, double range, double z_range) {
  ad::Var xy = ad::scalar_mul(ad::scalar_add(ad::sigmoid(ad::slice_cols(raw, 0, 2)), -0.5),
                              2.0 * range);
  ad::Var z = ad::scalar_mul(ad::scalar_add(ad::sigmoid(ad::slice_cols(raw, 2, 3)), -0.5),
                             2.0 * z_range);
  ad::Var size = ad::exp_(ad::slice_cols(raw, 3, 6));
  ad::Var rest = ad::slice_cols(raw, 6, 10);
  return ad::concat_cols({xy, z, size, rest});
}

inline DetOut det_head_forward(const std::vector<ad::Var>& layer_states, const Workspace& ws,
                               const ModelConfig& cfg) {
  DetOut out;
  for (const auto& x : layer_states) {
    ad::Var hc = ad::silu(ad::linear(x, ws.p("head.det.cls.fc1.w"), ws.p("head.det.cls.fc1.b")));
    out.cls_logits.push_back(ad::linear(hc, ws.p("head.det.cls.fc2.w"), ws.p("head.det.cls.fc2.b")));
    ad::Var hr = ad::silu(ad::linear(x, ws.p("head.det.reg.fc1.w"), ws.p("head.det.reg.fc1.b")));
    ad::Var raw = ad::add(ad::linear(hr, ws.p("head.det.reg.fc2.w"), ws.p("head.det.reg.fc2.b")),
                          ws.p("head.det.reg.anchor"));
    out.boxes.push_back(decode_box_regression(raw, cfg.range, cfg.z_range));
    out.attr_logits.push_back(ad::linear(x, ws.p("head.det.attr.w"), ws.p("head.det.attr.b")));
  }
  return out;
}

/// Each BEV query owns one grid cell; a shared MLP emits an s*s*C_b patch and
/// the patches tile the output grid.
inline ad::Var bev_head_forward(const ad::Var& bev_queries, const Workspace& ws,
                                const ModelConfig& cfg, int expected_side = -1) {
  const int g = cfg.bev_grid();
  if (expected_side >= 0 && g * cfg.bev_patch != expected_side)
    throw std::invalid_argument("bev head: grid " + std::to_string(g) + " x patch " +
                                std::to_string(cfg.bev_patch) + " does not tile side " +
                                std::to_string(expected_side));
  ad::Var h = ad::silu(ad::linear(bev_queries, ws.p("head.bev.fc1.w"), ws.p("head.bev.fc1.b")));
  ad::Var patches = ad::linear(h, ws.p("head.bev.fc2.w"), ws.p("head.bev.fc2.b"));
  return ad::tile_patches(patches, g, cfg.bev_patch, cfg.n_classes + 1);
}

struct ForwardOutput {
  SdOut sd;
  ad::Var q0_det, q1_det, s_p_det;
  ad::Var q0_bev, q1_bev, s_p_bev;
  std::vector<ad::Var> layer_states;  // concatenated det+bev query states per layer
  DetOut det;
  ad::Var bev_logits;
};

/// Full network pass over one multi-view sample (images as N*3*H*W floats).
inline ForwardOutput model_forward(const std::vector<float>& images, const ModelState& st,
                                   const ModelConfig& cfg, Workspace& ws,
                                   AttnProbe* probe = nullptr) {
  (void)st;
  cfg.validate();
  const int H = cfg.feat_h * 16, W = cfg.feat_w * 16;
  Tensor img({cfg.n_views, 3, H, W});
  if (static_cast<std::int64_t>(images.size()) != img.numel())
    throw std::invalid_argument("model_forward: image buffer size mismatch");
  for (size_t i = 0; i < images.size(); ++i) img.v[i] = images[i];

  ForwardOutput out;
  BackboneOut bb = backbone_forward(ad::constant(std::move(img)), ws, cfg);
  if (cfg.seg_branch || cfg.depth_branch)
    out.sd = sd_encoder_forward(bb.f5, ws, cfg, cfg.seg_branch, cfg.depth_branch);

  std::vector<ad::Var> query_groups;
  if (cfg.has_det_head()) {
    out.q0_det = ws.p("query.det");
    if (cfg.pqb) {
      PqbOut p = pqb_forward(out.sd.p_seg, ws.p("pqb.s_w"), out.q0_det);
      out.q1_det = p.q1;
      out.s_p_det = p.s_p;
    } else {
      out.q1_det = out.q0_det;
    }
    query_groups.push_back(out.q1_det);
  }
  if (cfg.has_bev_head()) {
    out.q0_bev = ws.p("query.bev");
    if (cfg.pqb) {
      PqbOut p = pqb_forward(out.sd.p_seg, ws.p("pqb.s_w"), out.q0_bev);
      out.q1_bev = p.q1;
      out.s_p_bev = p.s_p;
    } else {
      out.q1_bev = out.q0_bev;
    }
    query_groups.push_back(out.q1_bev);
  }
  ad::Var queries = query_groups.size() == 1 ? query_groups[0] : ad::concat_rows(query_groups);
  out.layer_states = decoder_forward(queries, bb.f4, ws, cfg, probe);

  if (cfg.has_det_head()) {
    std::vector<ad::Var> det_states;
    for (const auto& s : out.layer_states) det_states.push_back(
        cfg.has_bev_head() ? ad::slice_rows(s, 0, cfg.n_det_queries) : s);
    out.det = det_head_forward(det_states, ws, cfg);
  }
  if (cfg.has_bev_head()) {
    const ad::Var& last = out.layer_states.back();
    ad::Var bev_state = cfg.has_det_head()
                            ? ad::slice_rows(last, cfg.n_det_queries,
                                             cfg.n_det_queries + cfg.n_bev_queries)
                            : last;
    out.bev_logits = bev_head_forward(bev_state, ws, cfg);
  }
  return out;
}

// ---- box target helpers ----

/// Ground-truth 10-vector in decoded space: (x, y, z, w, l, h, sin, cos, vx, vy).
inline std::array<double, 10> box_to_target10(const Box3D& b) {
  return {b.center.x, b.center.y, b.center.z, b.w,   b.l, b.h,
          std::sin(b.yaw),        std::cos(b.yaw),   b.vx, b.vy};
}

/// Inverse of decode_box_regression for boxes strictly inside the range.
inline std::array<double, 10> encode_box_raw(const Box3D& b, double range, double z_range) {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  return {logit((b.center.x / (2.0 * range)) + 0.5),
          logit((b.center.y / (2.0 * range)) + 0.5),
          logit((b.center.z / (2.0 * z_range)) + 0.5),
          std::log(b.w),
          std::log(b.l),
          std::log(b.h),
          std::sin(b.yaw),
          std::cos(b.yaw),
          b.vx,
          b.vy};
}

// ---- checkpointing ----

struct Checkpoint {
  ModelState state;
  nlohmann::json config;  // opaque run configuration echo
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelState& st,
                            const nlohmann::json& config, std::int64_t step, std::uint64_t seed) {
  RecordWriter w;
  nlohmann::json meta;
  meta["config"] = config;
  meta["step"] = step;
  meta["seed"] = seed;
  w.set_meta(meta);
  for (const auto& [name, tensor] : st.params) w.add_f64(name, tensor.shape, tensor.v);
  w.write(path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  RecordReader r(path);
  Checkpoint ck;
  ck.config = r.meta().at("config");
  ck.step = r.meta().at("step").get<std::int64_t>();
  ck.seed = r.meta().at("seed").get<std::uint64_t>();
  for (const auto& f : r.header().at("fields")) {
    const std::string name = f.at("name");
    ck.state.params[name] = Tensor(f.at("shape").get<std::vector<int>>(), r.f64(name));
  }
  return ck;
}

}  // namespace sdbev
