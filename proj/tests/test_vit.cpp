#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "svt/vit.hpp"

using namespace svt;

namespace {

template <class T>
Tensor<T> rnd_images(int B, int H, int W, unsigned seed) {
  auto t = make_tensor<T>({B, H, W, 3});
  Rng rng(seed);
  for (auto& x : t->data) x = T(rng.uniform(0.0, 1.0));
  return t;
}

ViTConfig tiny_cfg(int hw = 32, int patch = 4) {
  ViTConfig c;
  c.image_h = c.image_w = hw;
  c.patch = patch;
  c.depth = 2;
  c.dim = 24;
  c.heads = 4;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace

TEST_CASE("patchify token counts and losslessness") {
  CHECK(patchify(rnd_images<float>(1, 32, 32, 1), 4)->shape ==
        Shape{1, 64, 48});
  CHECK(patchify(rnd_images<float>(1, 64, 64, 2), 8)->shape ==
        Shape{1, 64, 192});
  CHECK(patchify(rnd_images<float>(1, 16, 16, 3), 4)->shape ==
        Shape{1, 16, 48});

  auto img = rnd_images<float>(2, 24, 16, 7);
  auto back = unpatchify(patchify(img, 4), 4, 24, 16);
  CHECK(back->data == img->data);

  CHECK_THROWS_WITH_AS(patchify(rnd_images<float>(1, 30, 32, 1), 4),
                       doctest::Contains("shape error"), std::runtime_error);
}

TEST_CASE("patchify orders patches row-major with channels innermost") {
  // encode each pixel as 100*y + 10*x + c
  auto img = make_tensor<float>({1, 8, 8, 3});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        img->data[(std::size_t)(y * 8 + x) * 3 + c] =
            float(100 * y + 10 * x + c);
  auto t = patchify(img, 4);  // [1, 4, 48]
  // token 1 covers columns 4..7 of rows 0..3; its first entry is (0,4,0)
  CHECK(t->data[48] == 40.0f);
  // token 2 covers rows 4..7 of columns 0..3
  CHECK(t->data[2 * 48] == 400.0f);
  // inside token 0: entry (py=1, px=2, c=1) sits at 1*12 + 2*3 + 1
  CHECK(t->data[12 + 6 + 1] == 121.0f);
}

TEST_CASE("patchify routes gradients back to the right pixels") {
  auto img = rnd_images<double>(1, 8, 8, 11);
  img->requires_grad = true;
  auto r = gradcheck::check<double>(
      [&] { return mean(mul(patchify(img, 4), patchify(img, 4))); }, {img});
  CHECK(r.worst_rel < 1e-6);
}

TEST_CASE("parameter count matches the published model size") {
  ViTConfig c;  // defaults are the Table-1 ViT for 32x32 inputs
  c.validate();
  const auto n = ViT<float>::param_count(c);
  CHECK(n == 2695680);
  CHECK(std::abs(double(n) / 2.8e6 - 1.0) < 0.05);

  auto m = make_vit<float>(tiny_cfg());
  std::int64_t total = 0;
  for (auto& p : m.params()) total += (std::int64_t)p.t->size();
  CHECK(total == ViT<float>::param_count(tiny_cfg()));
  CHECK(m.params().size() == 6 + 12 * 2);
}

TEST_CASE("init schemes respect their bounds and are deterministic") {
  auto cfg = tiny_cfg();
  Rng r1(5), r2(5);

  SUBCASE("truncated normal stays inside two sigma") {
    auto m = make_vit<float>(cfg, Init::trunc_normal, r1);
    for (auto& p : m.params()) {
      const bool drawn = p.name == "cls" || p.name == "pos" ||
                         (p.name.size() > 2 &&
                          p.name.compare(p.name.size() - 2, 2, ".w") == 0);
      if (!drawn) continue;
      float mx = 0;
      for (auto v : p.t->data) mx = std::max(mx, std::abs(v));
      CHECK(mx <= 0.04f + 1e-7f);
      CHECK(mx > 0.0f);
    }
  }
  SUBCASE("xavier bound follows the fan sum") {
    ViTConfig big = cfg;
    big.dim = 192;
    big.heads = 12;
    big.depth = 1;
    auto m = make_vit<float>(big, Init::xavier, r1);
    const float bound = std::sqrt(6.0f / (192 + 192));
    CHECK(bound == doctest::Approx(0.125f).epsilon(1e-3));
    float mx = 0;
    for (auto v : m.blocks[0].proj_w->data) mx = std::max(mx, std::abs(v));
    CHECK(mx <= bound + 1e-7f);
    CHECK(mx > 0.9f * bound);  // 36864 draws should get close to the edge
  }
  SUBCASE("uniform stays inside 0.05") {
    auto m = make_vit<float>(cfg, Init::uniform, r1);
    float mx = 0;
    for (auto v : m.patch_w->data) mx = std::max(mx, std::abs(v));
    CHECK(mx <= 0.05f);
    CHECK(mx > 0.045f);
  }
  SUBCASE("same seed gives bit-identical weights") {
    auto a = make_vit<float>(cfg, Init::trunc_normal, r1);
    auto b = make_vit<float>(cfg, Init::trunc_normal, r2);
    auto pa = a.params(), pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(pa[i].t->data == pb[i].t->data);
  }
  SUBCASE("unknown scheme name is rejected") {
    CHECK(parse_init("truncated-normal") == Init::trunc_normal);
    CHECK_THROWS_WITH_AS(parse_init("kaiming"),
                         doctest::Contains("parameter error"),
                         std::runtime_error);
  }
}

TEST_CASE("token-count law across view sizes") {
  Rng rng(3);
  auto m = make_vit<float>(tiny_cfg(), Init::trunc_normal, rng);
  NoGrad<float> ng;
  for (int hw : {32, 16, 8}) {
    auto out = svt::forward(m, rnd_images<float>(2, hw, hw, 21));
    const int n = (hw / 4) * (hw / 4);
    CHECK(out.patches->shape == Shape{2, n, 24});
    CHECK(out.cls->shape == Shape{2, 24});
  }
}

TEST_CASE("attention maps are row-stochastic per block and head") {
  Rng rng(9);
  auto m = make_vit<float>(tiny_cfg(16, 4), Init::trunc_normal, rng);
  NoGrad<float> ng;
  auto out = svt::forward(m, rnd_images<float>(2, 16, 16, 5), true);
  REQUIRE(out.attention.size() == 2);
  for (auto& a : out.attention) {
    REQUIRE(a->shape == Shape{2, 4, 17, 17});
    const float* p = a->ptr();
    for (std::size_t row = 0; row < a->size() / 17; ++row) {
      float s = 0;
      for (int j = 0; j < 17; ++j) s += p[row * 17 + j];
      CHECK(std::abs(s - 1.0f) < 1e-5f);
    }
  }
}

TEST_CASE("zeroed attention and mlp reduce to a normed embedding") {
  Rng rng(13);
  auto m = make_vit<float>(tiny_cfg(16, 4), Init::trunc_normal, rng);
  for (auto& b : m.blocks)
    for (auto* w : {&b.qkv_w, &b.proj_w, &b.fc1_w, &b.fc2_w})
      std::fill((*w)->data.begin(), (*w)->data.end(), 0.0f);

  auto imgs = rnd_images<float>(2, 16, 16, 31);
  NoGrad<float> ng;
  auto out = svt::forward(m, imgs);

  auto tok = linear(patchify(imgs, 4), m.patch_w, m.patch_b);
  auto want = layer_norm(add_pos(prepend_cls(tok, m.cls), m.pos), m.norm_g,
                         m.norm_b);
  auto want_cls = take_cls(want);
  for (std::size_t i = 0; i < out.cls->size(); ++i)
    CHECK(std::abs(out.cls->data[i] - want_cls->data[i]) <= 1e-7f);
}

TEST_CASE("batch permutation permutes outputs with no cross-mixing") {
  Rng rng(17);
  auto m = make_vit<float>(tiny_cfg(16, 4), Init::xavier, rng);
  auto imgs = rnd_images<float>(3, 16, 16, 41);
  NoGrad<float> ng;
  auto out = svt::forward(m, imgs);

  const int perm[3] = {2, 0, 1};
  auto shuffled = make_tensor<float>({3, 16, 16, 3});
  const std::size_t stride = 16 * 16 * 3;
  for (int b = 0; b < 3; ++b)
    std::copy(imgs->data.begin() + perm[b] * stride,
              imgs->data.begin() + (perm[b] + 1) * stride,
              shuffled->data.begin() + b * stride);
  auto out2 = svt::forward(m, shuffled);
  for (int b = 0; b < 3; ++b)
    for (int j = 0; j < 24; ++j)
      CHECK(out2.cls->data[b * 24 + j] == out.cls->data[perm[b] * 24 + j]);
}

TEST_CASE("shuffling tokens with their positions leaves cls invariant") {
  Rng rng(23);
  auto cfg = tiny_cfg(16, 4);  // 16 patch tokens
  auto m = make_vit<float>(cfg, Init::trunc_normal, rng);
  auto imgs = rnd_images<float>(2, 16, 16, 51);
  NoGrad<float> ng;
  auto base = svt::forward(m, imgs);

  std::vector<int> perm(16);
  for (int i = 0; i < 16; ++i) perm[i] = i;
  Rng prng(77);
  shuffle(perm, prng);

  auto toks = patchify(imgs, 4);
  auto toks2 = make_tensor<float>(toks->shape);
  const int pd = 48;
  for (int b = 0; b < 2; ++b)
    for (int q = 0; q < 16; ++q)
      std::copy(toks->data.begin() + ((std::size_t)b * 16 + perm[q]) * pd,
                toks->data.begin() + ((std::size_t)b * 16 + perm[q] + 1) * pd,
                toks2->data.begin() + ((std::size_t)b * 16 + q) * pd);
  auto imgs2 = unpatchify(toks2, 4, 16, 16);

  auto old_pos = m.pos->data;
  for (int q = 0; q < 16; ++q)
    std::copy(old_pos.begin() + (1 + perm[q]) * 24,
              old_pos.begin() + (1 + perm[q] + 1) * 24,
              m.pos->data.begin() + (1 + q) * 24);

  auto moved = svt::forward(m, imgs2);
  for (std::size_t i = 0; i < base.cls->size(); ++i)
    CHECK(std::abs(moved.cls->data[i] - base.cls->data[i]) < 1e-5f);
}

TEST_CASE("full encoder gradient matches finite differences at f64") {
  ViTConfig cfg;
  cfg.image_h = cfg.image_w = 8;
  cfg.patch = 4;
  cfg.depth = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  Rng rng(29);
  auto m = make_vit<double>(cfg, Init::trunc_normal, rng);
  auto imgs = rnd_images<double>(2, 8, 8, 61);

  std::vector<Tensor<double>> wrt;
  for (auto& p : m.params()) wrt.push_back(p.t);
  auto r = gradcheck::check<double>(
      [&] {
        auto out = svt::forward(m, imgs);
        return add(mean(mul(out.cls, out.cls)),
                   mean(mul(out.patches, out.patches)));
      },
      wrt);
  CHECK(r.worst_rel < 1e-5);
  CHECK(r.checked == 18);  // every parameter tensor of the model
}

TEST_CASE("non-square native grids work at native size only") {
  ViTConfig cfg = tiny_cfg(16, 4);
  cfg.image_w = 24;  // 4x6 grid
  Rng rng(31);
  auto m = make_vit<float>(cfg, Init::uniform, rng);
  NoGrad<float> ng;
  auto out = svt::forward(m, rnd_images<float>(1, 16, 24, 71));
  CHECK(out.patches->shape == Shape{1, 24, 24});
  CHECK_THROWS_WITH_AS(svt::forward(m, rnd_images<float>(1, 8, 8, 72)),
                       doctest::Contains("square"), std::runtime_error);
}

TEST_CASE("config and view validation errors") {
  ViTConfig bad = tiny_cfg();
  bad.dim = 25;  // not divisible by heads
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("parameter error"),
                       std::runtime_error);
  bad = tiny_cfg();
  bad.image_h = 30;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("divisible"),
                       std::runtime_error);

  Rng rng(37);
  auto m = make_vit<float>(tiny_cfg(16, 4), Init::uniform, rng);
  NoGrad<float> ng;
  CHECK_THROWS_WITH_AS(svt::forward(m, rnd_images<float>(1, 32, 32, 73)),
                       doctest::Contains("exceeds"), std::runtime_error);
  CHECK_THROWS_WITH_AS(svt::forward(m, rnd_images<float>(1, 10, 10, 74)),
                       doctest::Contains("shape error"), std::runtime_error);
}

TEST_CASE("dropout trains stochastically and evaluates deterministically") {
  ViTConfig cfg = tiny_cfg(16, 4);
  cfg.dropout = 0.1;
  cfg.attn_dropout = 0.1;
  Rng rng(43);
  auto m = make_vit<float>(cfg, Init::trunc_normal, rng);
  auto imgs = rnd_images<float>(2, 16, 16, 81);
  NoGrad<float> ng;

  Rng d1(100), d2(200);
  auto a = svt::forward(m, imgs, false, true, &d1);
  auto b = svt::forward(m, imgs, false, true, &d2);
  bool differ = false;
  for (std::size_t i = 0; i < a.cls->size(); ++i)
    if (a.cls->data[i] != b.cls->data[i]) differ = true;
  CHECK(differ);

  auto e1 = svt::forward(m, imgs);
  auto e2 = svt::forward(m, imgs);
  CHECK(e1.cls->data == e2.cls->data);

  CHECK_THROWS_WITH_AS(svt::forward(m, imgs, false, true, nullptr),
                       doctest::Contains("usage error"), std::runtime_error);
}
