#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svt/ops.hpp"
#include "svt/optim.hpp"
#include "svt/rng.hpp"

namespace svt {

struct ViTConfig {
  int image_h = 32, image_w = 32;
  int patch = 4;
  int depth = 9;
  int dim = 192;
  int heads = 12;
  int mlp_ratio = 2;
  double dropout = 0.0;
  double attn_dropout = 0.0;

  void validate() const {
    if (image_h <= 0 || image_w <= 0 || patch <= 0)
      throw param_error("vit: image and patch sizes must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw param_error("vit: image " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) +
                        " not divisible by patch " + std::to_string(patch));
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
      throw param_error("vit: token_dim " + std::to_string(dim) +
                        " must be a positive multiple of heads " +
                        std::to_string(heads));
    if (depth < 1) throw param_error("vit: depth must be >= 1");
    if (mlp_ratio < 1) throw param_error("vit: mlp_ratio must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0 || attn_dropout < 0.0 ||
        attn_dropout >= 1.0)
      throw param_error("vit: dropout rates must lie in [0, 1)");
  }

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
  int tokens() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * 3; }
  int hidden() const { return mlp_ratio * dim; }
};

// ---------------------------------------------------------------------------
// patch extraction
// ---------------------------------------------------------------------------

// [B,H,W,3] -> [B, (H/p)(W/p), p*p*3]; patches ordered top-left to
// bottom-right, each flattened row-major with channels innermost. Lossless.
template <class T>
Tensor<T> patchify(const Tensor<T>& images, int p) {
  if (images->shape.size() != 4 || images->shape[3] != 3)
    throw shape_error("patchify: want [B,H,W,3], got " +
                      shape_str(images->shape));
  const int B = images->shape[0], H = images->shape[1], W = images->shape[2];
  if (p <= 0 || H % p != 0 || W % p != 0)
    throw shape_error("patchify: " + std::to_string(H) + "x" +
                      std::to_string(W) + " not divisible by patch " +
                      std::to_string(p));
  const int gh = H / p, gw = W / p, n = gh * gw, pd = p * p * 3;
  auto out = make_tensor<T>({B, n, pd});
  const T* src = images->ptr();
  T* dst = out->ptr();
  for (int b = 0; b < B; ++b)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        T* row = dst + ((std::size_t)b * n + (std::size_t)gy * gw + gx) * pd;
        for (int py = 0; py < p; ++py) {
          const T* line =
              src + (((std::size_t)b * H + gy * p + py) * W + gx * p) * 3;
          std::copy(line, line + (std::size_t)p * 3, row + (std::size_t)py * p * 3);
        }
      }
  TensorT<T>* op = out.get();
  record_op<T>({images}, out, [images, op, p, gh, gw, n, pd, B, H, W]() {
    if (!detail::needs(images)) return;
    const T* g = op->grad.data();
    T* gi = images->grad_buf().data();
    for (int b = 0; b < B; ++b)
      for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
          const T* row = g + ((std::size_t)b * n + (std::size_t)gy * gw + gx) * pd;
          for (int py = 0; py < p; ++py) {
            T* line =
                gi + (((std::size_t)b * H + gy * p + py) * W + gx * p) * 3;
            const T* rl = row + (std::size_t)py * p * 3;
            for (int i = 0; i < p * 3; ++i) line[i] += rl[i];
          }
        }
  });
  return out;
}

// exact inverse of patchify (data transform only, not differentiable)
template <class T>
Tensor<T> unpatchify(const Tensor<T>& tokens, int p, int H, int W) {
  const int gh = H / p, gw = W / p, n = gh * gw, pd = p * p * 3;
  if (tokens->shape.size() != 3 || tokens->shape[1] != n ||
      tokens->shape[2] != pd)
    throw shape_error("unpatchify: want [B," + std::to_string(n) + "," +
                      std::to_string(pd) + "], got " +
                      shape_str(tokens->shape));
  const int B = tokens->shape[0];
  auto out = make_tensor<T>({B, H, W, 3});
  const T* src = tokens->ptr();
  T* dst = out->ptr();
  for (int b = 0; b < B; ++b)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const T* row = src + ((std::size_t)b * n + (std::size_t)gy * gw + gx) * pd;
        for (int py = 0; py < p; ++py) {
          T* line = dst + (((std::size_t)b * H + gy * p + py) * W + gx * p) * 3;
          std::copy(row + (std::size_t)py * p * 3,
                    row + (std::size_t)(py + 1) * p * 3, line);
        }
      }
  return out;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <class T>
struct ViT {
  ViTConfig cfg;

  Tensor<T> patch_w, patch_b;  // [dim, p*p*3], [dim]
  Tensor<T> cls;               // [dim]
  Tensor<T> pos;               // [1+n, dim], row 0 belongs to CLS

  struct Block {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> qkv_w, qkv_b;    // [3*dim, dim], [3*dim]
    Tensor<T> proj_w, proj_b;  // [dim, dim], [dim]
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> fc1_w, fc1_b;    // [hidden, dim]
    Tensor<T> fc2_w, fc2_b;    // [dim, hidden]
  };
  std::vector<Block> blocks;
  Tensor<T> norm_g, norm_b;

  // named parameters in a stable order (checkpoint + optimizer alignment)
  Params<T> params() {
    Params<T> out;
    out.push_back({"patch.w", patch_w});
    out.push_back({"patch.b", patch_b});
    out.push_back({"cls", cls});
    out.push_back({"pos", pos});
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string pre = "blocks." + std::to_string(i) + ".";
      out.push_back({pre + "ln1.g", b.ln1_g});
      out.push_back({pre + "ln1.b", b.ln1_b});
      out.push_back({pre + "attn.qkv.w", b.qkv_w});
      out.push_back({pre + "attn.qkv.b", b.qkv_b});
      out.push_back({pre + "attn.proj.w", b.proj_w});
      out.push_back({pre + "attn.proj.b", b.proj_b});
      out.push_back({pre + "ln2.g", b.ln2_g});
      out.push_back({pre + "ln2.b", b.ln2_b});
      out.push_back({pre + "mlp.fc1.w", b.fc1_w});
      out.push_back({pre + "mlp.fc1.b", b.fc1_b});
      out.push_back({pre + "mlp.fc2.w", b.fc2_w});
      out.push_back({pre + "mlp.fc2.b", b.fc2_b});
    }
    out.push_back({"norm.g", norm_g});
    out.push_back({"norm.b", norm_b});
    return out;
  }

  static std::int64_t param_count(const ViTConfig& c) {
    const std::int64_t d = c.dim, pd = c.patch_dim(), h = c.hidden();
    const std::int64_t n = c.tokens();
    std::int64_t per_block = 2 * d                  // ln1
                             + 3 * d * d + 3 * d    // qkv
                             + d * d + d            // proj
                             + 2 * d                // ln2
                             + h * d + h            // fc1
                             + d * h + d;           // fc2
    return d * pd + d        // patch projection
           + d               // cls
           + (n + 1) * d     // positions
           + c.depth * per_block + 2 * d;
  }
};

enum class Init { uniform, xavier, trunc_normal };

inline Init parse_init(const std::string& s) {
  if (s == "uniform") return Init::uniform;
  if (s == "xavier") return Init::xavier;
  if (s == "truncated-normal" || s == "trunc-normal") return Init::trunc_normal;
  throw param_error("unknown init scheme '" + s +
                    "' (want uniform | xavier | truncated-normal)");
}

namespace detail {

template <class T>
void fill_weight(Tensor<T>& w, Init scheme, int fan_in, int fan_out,
                 Rng& rng) {
  switch (scheme) {
    case Init::uniform:
      for (auto& x : w->data) x = T(rng.uniform(-0.05, 0.05));
      break;
    case Init::xavier: {
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (auto& x : w->data) x = T(rng.uniform(-bound, bound));
      break;
    }
    case Init::trunc_normal:
      for (auto& x : w->data) x = T(rng.trunc_normal(0.02));
      break;
  }
}

}  // namespace detail

template <class T>
ViT<T> make_vit(const ViTConfig& cfg) {
  cfg.validate();
  ViT<T> m;
  m.cfg = cfg;
  const int d = cfg.dim, pd = cfg.patch_dim(), h = cfg.hidden();
  auto grad = [](Shape s) { return make_tensor<T>(std::move(s), true); };
  m.patch_w = grad({d, pd});
  m.patch_b = grad({d});
  m.cls = grad({d});
  m.pos = grad({cfg.tokens() + 1, d});
  m.blocks.resize(cfg.depth);
  for (auto& b : m.blocks) {
    b.ln1_g = grad({d});
    b.ln1_b = grad({d});
    b.qkv_w = grad({3 * d, d});
    b.qkv_b = grad({3 * d});
    b.proj_w = grad({d, d});
    b.proj_b = grad({d});
    b.ln2_g = grad({d});
    b.ln2_b = grad({d});
    b.fc1_w = grad({h, d});
    b.fc1_b = grad({h});
    b.fc2_w = grad({d, h});
    b.fc2_b = grad({d});
  }
  m.norm_g = grad({d});
  m.norm_b = grad({d});
  return m;
}

// Weight matrices follow the chosen scheme; CLS and position embeddings are
// always truncated-normal sigma=0.02; biases 0; norm gains 1.
template <class T>
void init_weights(ViT<T>& m, Init scheme, Rng& rng) {
  const int d = m.cfg.dim, pd = m.cfg.patch_dim(), h = m.cfg.hidden();
  auto zero = [](Tensor<T>& t) { std::fill(t->data.begin(), t->data.end(), T(0)); };
  auto one = [](Tensor<T>& t) { std::fill(t->data.begin(), t->data.end(), T(1)); };

  detail::fill_weight(m.patch_w, scheme, pd, d, rng);
  zero(m.patch_b);
  for (auto& x : m.cls->data) x = T(rng.trunc_normal(0.02));
  for (auto& x : m.pos->data) x = T(rng.trunc_normal(0.02));
  for (auto& b : m.blocks) {
    one(b.ln1_g);
    zero(b.ln1_b);
    detail::fill_weight(b.qkv_w, scheme, d, 3 * d, rng);
    zero(b.qkv_b);
    detail::fill_weight(b.proj_w, scheme, d, d, rng);
    zero(b.proj_b);
    one(b.ln2_g);
    zero(b.ln2_b);
    detail::fill_weight(b.fc1_w, scheme, d, h, rng);
    zero(b.fc1_b);
    detail::fill_weight(b.fc2_w, scheme, h, d, rng);
    zero(b.fc2_b);
  }
  one(m.norm_g);
  zero(m.norm_b);
}

template <class T>
ViT<T> make_vit(const ViTConfig& cfg, Init scheme, Rng& rng) {
  auto m = make_vit<T>(cfg);
  init_weights(m, scheme, rng);
  return m;
}

template <class T>
struct EncoderOut {
  Tensor<T> cls;                      // [B, dim]
  Tensor<T> patches;                  // [B, n, dim]
  std::vector<Tensor<T>> attention;   // depth x [B, heads, n+1, n+1]
};

// Forward over [B,h',w',3] views; smaller-than-native views get their
// position grid bilinearly resized (square grids only on that path).
template <class T>
EncoderOut<T> forward(ViT<T>& m, const Tensor<T>& images,
                      bool want_attention = false, bool training = false,
                      Rng* rng = nullptr) {
  const auto& cfg = m.cfg;
  if (images->shape.size() != 4 || images->shape[3] != 3)
    throw shape_error("vit forward: want [B,H,W,3], got " +
                      shape_str(images->shape));
  const int H = images->shape[1], W = images->shape[2];
  if (H % cfg.patch != 0 || W % cfg.patch != 0)
    throw shape_error("vit forward: view " + std::to_string(H) + "x" +
                      std::to_string(W) + " not divisible by patch " +
                      std::to_string(cfg.patch));
  if (H > cfg.image_h || W > cfg.image_w)
    throw param_error("vit forward: view " + std::to_string(H) + "x" +
                      std::to_string(W) + " exceeds configured " +
                      std::to_string(cfg.image_h) + "x" +
                      std::to_string(cfg.image_w));
  const bool dropping = training && (cfg.dropout > 0 || cfg.attn_dropout > 0);
  if (dropping && !rng)
    throw usage_error("vit forward: dropout in training mode needs an rng");

  const int gh = H / cfg.patch, gw = W / cfg.patch;
  Tensor<T> pos_used = m.pos;
  if (gh != cfg.grid_h() || gw != cfg.grid_w()) {
    if (cfg.grid_h() != cfg.grid_w() || gh != gw)
      throw param_error(
          "vit forward: position resizing needs square grids, got " +
          std::to_string(gh) + "x" + std::to_string(gw) + " from " +
          std::to_string(cfg.grid_h()) + "x" + std::to_string(cfg.grid_w()));
    pos_used = interp_pos(m.pos, cfg.grid_h(), gh);
  }

  auto drop = [&](Tensor<T> x, double p) {
    if (!training || p <= 0) return x;
    return dropout(x, p, *rng, training);
  };

  auto tok = linear(patchify(images, cfg.patch), m.patch_w, m.patch_b);
  auto x = drop(add_pos(prepend_cls(tok, m.cls), pos_used), cfg.dropout);

  EncoderOut<T> out;
  for (int i = 0; i < cfg.depth; ++i) {
    auto& b = m.blocks[(std::size_t)i];
    try {
      Tensor<T> attn;
      auto h1 = layer_norm(x, b.ln1_g, b.ln1_b);
      auto ctx = mha(linear(h1, b.qkv_w, b.qkv_b), cfg.heads,
                     want_attention ? &attn : nullptr);
      ctx = drop(ctx, cfg.attn_dropout);
      x = add(x, drop(linear(ctx, b.proj_w, b.proj_b), cfg.dropout));
      auto h2 = layer_norm(x, b.ln2_g, b.ln2_b);
      auto mlp = linear(gelu(linear(h2, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
      x = add(x, drop(mlp, cfg.dropout));
      if (want_attention) out.attention.push_back(attn);
    } catch (const std::runtime_error& e) {
      if (std::string(e.what()).rfind("numeric error", 0) == 0)
        throw std::runtime_error(std::string(e.what()) + " (encoder block " +
                                 std::to_string(i) + ")");
      throw;
    }
  }
  x = layer_norm(x, m.norm_g, m.norm_b);
  out.cls = take_cls(x);
  out.patches = slice(x, 1, 1, gh * gw);
  return out;
}

}  // namespace svt
