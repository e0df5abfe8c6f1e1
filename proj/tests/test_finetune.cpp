#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include <doctest.h>

#include "svt/distill.hpp"
#include "svt/finetune.hpp"

using namespace svt;

namespace {

ViTConfig tiny_vit() {
  ViTConfig c;
  c.image_h = c.image_w = 16;
  c.patch = 4;
  c.depth = 1;
  c.dim = 16;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

Checkpoint tiny_ssl_checkpoint(int epochs, std::uint64_t seed = 99) {
  auto data = synthetic_dataset(1, 8, 2, 16);
  DistillConfig dc;
  dc.epochs = epochs;
  dc.batch = 8;
  dc.warmup_epochs = 0;
  dc.k_dim = 16;
  dc.head_hidden = 16;
  dc.head_bottleneck = 8;
  ViewConfig views;
  views.global_out = 16;
  views.local_out = 8;
  views.n_local = 2;
  auto st = pretrain<float>(data, tiny_vit(), dc, views, seed);
  return distill_checkpoint(st, "{}");
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  long double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += (long double)a[i] * b[i];
    na += (long double)a[i] * a[i];
    nb += (long double)b[i] * b[i];
  }
  return double(dot / std::sqrt(na * nb));
}

}  // namespace

TEST_CASE("classifier head draws small weights and zero bias") {
  Rng rng(3);
  auto c = make_classifier<float>(24, 10, rng);
  CHECK(c.w->shape == Shape{10, 24});
  CHECK(c.b->shape == Shape{10});
  for (auto v : c.w->data) {
    CHECK(std::abs(v) <= 0.04f);
    CHECK(v != 0.0f);
  }
  for (auto v : c.b->data) CHECK(v == 0.0f);
  CHECK_THROWS_WITH_AS(make_classifier<float>(24, 1, rng),
                       doctest::Contains("parameter error"),
                       std::runtime_error);
}

TEST_CASE("init source names parse to the five schemes") {
  CHECK(parse_init_source("self-supervised-teacher") == InitSource::ssl_teacher);
  CHECK(parse_init_source("self-supervised") == InitSource::ssl_teacher);
  CHECK(parse_init_source("self-supervised-student") == InitSource::ssl_student);
  CHECK(parse_init_source("uniform") == InitSource::uniform);
  CHECK(parse_init_source("xavier") == InitSource::xavier);
  CHECK(parse_init_source("truncated-normal") == InitSource::trunc_normal);
  CHECK_THROWS_WITH_AS(parse_init_source("gradinit"),
                       doctest::Contains("unknown init source 'gradinit'"),
                       std::runtime_error);
}

TEST_CASE("backbone transfer is bit-exact with cosine similarity 1") {
  auto ck = tiny_ssl_checkpoint(0);
  auto vit = make_vit<float>(tiny_vit());
  load_backbone(ck, vit);  // teacher by default
  for (auto& p : vit.params()) {
    const auto* e = ck.find("teacher." + p.name);
    REQUIRE(e != nullptr);
    REQUIRE(e->data.size() == p.t->data.size());
    double norm = 0;
    for (std::size_t i = 0; i < e->data.size(); ++i) {
      CHECK(e->data[i] == p.t->data[i]);
      norm += double(e->data[i]) * e->data[i];
    }
    // zero-filled tensors (fresh biases) have no direction to compare
    if (norm > 0) CHECK(cosine(p.t->data, e->data) > 1.0 - 1e-12);
  }

  CHECK_THROWS_WITH_AS(load_backbone(ck, vit, "ema"),
                       doctest::Contains("'teacher' or 'student'"),
                       std::runtime_error);
  ViTConfig wrong = tiny_vit();
  wrong.dim = 32;
  auto other = make_vit<float>(wrong);
  CHECK_THROWS_WITH_AS(load_backbone(ck, other, "teacher"),
                       doctest::Contains("shape error"), std::runtime_error);
}

TEST_CASE("teacher and student sources diverge once training ran") {
  auto ck = tiny_ssl_checkpoint(1);
  auto t = make_vit<float>(tiny_vit()), s = make_vit<float>(tiny_vit());
  load_backbone(ck, t, "teacher");
  load_backbone(ck, s, "student");
  bool differ = false;
  auto tp = t.params(), sp = s.params();
  for (std::size_t i = 0; i < tp.size() && !differ; ++i)
    for (std::size_t j = 0; j < tp[i].t->data.size() && !differ; ++j)
      differ = tp[i].t->data[j] != sp[i].t->data[j];
  CHECK(differ);
}

TEST_CASE("label smoothing formula and its optimum") {
  std::vector<int> labels = {2, 0};
  auto plain = smooth_labels<float>(labels, 4, 0.0f);
  for (int j = 0; j < 4; ++j) {
    CHECK(plain->data[j] == (j == 2 ? 1.0f : 0.0f));
    CHECK(plain->data[4 + j] == (j == 0 ? 1.0f : 0.0f));
  }

  auto soft = smooth_labels<float>({3}, 10, 0.1f);
  for (int j = 0; j < 10; ++j)
    CHECK(std::abs(double(soft->data[j]) - (j == 3 ? 0.91 : 0.01)) < 1e-7);
  double sum = 0;
  for (auto v : soft->data) sum += double(v);
  CHECK(std::abs(sum - 1.0) < 1e-6);

  CHECK_THROWS_WITH_AS(smooth_labels<float>({0}, 3, 1.0f),
                       doctest::Contains("[0,1)"), std::runtime_error);
  CHECK_THROWS_WITH_AS(smooth_labels<float>({7}, 3, 0.1f),
                       doctest::Contains("label 7"), std::runtime_error);

  // at the optimum (logits = log target), the smoothed loss is the target
  // entropy -- strictly above the one-hot optimum of zero
  auto t3 = smooth_labels<float>({1}, 3, 0.1f);
  auto logit = make_tensor<float>({1, 3});
  long double ent = 0;
  for (int j = 0; j < 3; ++j) {
    logit->data[j] = std::log(t3->data[j]);
    ent -= (long double)t3->data[j] * std::log((long double)t3->data[j]);
  }
  auto loss = cross_entropy(logit, t3);
  CHECK(std::abs((long double)loss->data[0] - ent) < 1e-6L);
  CHECK(loss->data[0] > 0.0f);
}

TEST_CASE("plain cross entropy equals mean negative log likelihood") {
  Rng rng(13);
  const int B = 5, K = 7;
  auto logits = make_tensor<float>({B, K});
  for (auto& v : logits->data) v = float(2.0 * rng.uniform() - 1.0);
  std::vector<int> labels;
  for (int i = 0; i < B; ++i) labels.push_back(int(rng.randint(K)));

  auto loss = cross_entropy(logits, smooth_labels<float>(labels, K, 0.0f));

  long double want = 0;
  for (int i = 0; i < B; ++i) {
    std::vector<long double> row(K);
    long double mx = -1e30L;
    for (int j = 0; j < K; ++j) mx = std::max(mx, row[j] = logits->data[std::size_t(i) * K + j]);
    long double z = 0;
    for (auto v : row) z += std::exp(v - mx);
    want -= row[(std::size_t)labels[(std::size_t)i]] - mx - std::log(z);
  }
  want /= B;
  CHECK(std::abs((long double)loss->data[0] - want) < 1e-6L);
}

TEST_CASE("symmetric beta sampler has the right shape") {
  Rng rng(101);
  const int n = 20000;
  double mean = 0, var = 0, low = 0;
  std::vector<double> draws;
  for (int i = 0; i < n; ++i) {
    const double x = detail::beta_symmetric(rng, 0.8);
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
    draws.push_back(x);
    mean += x;
  }
  mean /= n;
  for (double x : draws) var += (x - mean) * (x - mean);
  var /= n;
  CHECK(std::abs(mean - 0.5) < 0.02);
  // Var Beta(a,a) = 1/(4(2a+1)) = 0.09615 at a=0.8
  CHECK(std::abs(var - 0.09615) < 0.005);

  Rng u1(7), u2(7);
  for (int i = 0; i < 50; ++i)
    CHECK(detail::beta_symmetric(u1, 1.0) == detail::beta_symmetric(u2, 1.0));
  // alpha=1 is the uniform distribution
  Rng u(11);
  for (int i = 0; i < n; ++i) low += detail::beta_symmetric(u, 1.0) < 0.25;
  CHECK(std::abs(low / n - 0.25) < 0.02);

  CHECK_THROWS_WITH_AS(detail::beta_symmetric(rng, 0.0),
                       doctest::Contains("alpha"), std::runtime_error);
}

TEST_CASE("mixup blends images and labels convexly") {
  const int B = 2, S = 2;
  auto mk = [&](float a, float b) {
    auto x = make_tensor<float>({B, S, S, 3});
    for (int e = 0; e < S * S * 3; ++e) {
      x->data[(std::size_t)e] = a;
      x->data[std::size_t(S * S * 3 + e)] = b;
    }
    return x;
  };
  std::vector<int> perm = {1, 0};

  auto x1 = mk(1.0f, 3.0f);
  auto y1 = smooth_labels<float>({0, 1}, 2, 0.0f);
  mixup_batch(x1, y1, perm, 1.0f);
  for (int e = 0; e < S * S * 3; ++e) CHECK(x1->data[(std::size_t)e] == 1.0f);
  CHECK(y1->data[0] == 1.0f);

  auto x0 = mk(1.0f, 3.0f);
  auto y0 = smooth_labels<float>({0, 1}, 2, 0.0f);
  mixup_batch(x0, y0, perm, 0.0f);
  for (int e = 0; e < S * S * 3; ++e) CHECK(x0->data[(std::size_t)e] == 3.0f);
  CHECK(y0->data[1] == 1.0f);

  auto xm = mk(1.0f, 3.0f);
  auto ym = smooth_labels<float>({0, 1}, 2, 0.1f);
  mixup_batch(xm, ym, perm, 0.5f);
  for (auto v : xm->data) CHECK(v == 2.0f);
  for (int i = 0; i < B; ++i) {
    double s = 0;
    for (int j = 0; j < 2; ++j) s += ym->data[std::size_t(i) * 2 + j];
    CHECK(std::abs(s - 1.0) < 1e-6);
  }

  std::vector<int> bad = {1, 5};
  CHECK_THROWS_WITH_AS(mixup_batch(xm, ym, bad, 0.5f),
                       doctest::Contains("permutation"), std::runtime_error);
}

TEST_CASE("cutmix label weight equals the replaced-pixel fraction exactly") {
  const int B = 2, S = 8;
  Rng rng(19);
  auto x = make_tensor<float>({B, S, S, 3});
  for (int e = 0; e < S * S * 3; ++e) {
    x->data[(std::size_t)e] = 1.0f;
    x->data[std::size_t(S * S * 3 + e)] = 2.0f;
  }
  auto y = smooth_labels<float>({0, 1}, 2, 0.0f);
  std::vector<int> perm = {1, 0};
  const double lp = cutmix_batch(x, y, perm, 0.4, rng);

  long replaced = 0;
  for (int yy = 0; yy < S; ++yy)
    for (int xx = 0; xx < S; ++xx)
      replaced += x->data[((std::size_t)yy * S + xx) * 3] == 2.0f;
  CHECK(lp == 1.0 - double(replaced) / (S * S));
  CHECK(std::abs(double(y->data[0]) - lp) < 1e-7);
  CHECK(std::abs(double(y->data[3]) - lp) < 1e-7);

  // lambda = 1 leaves everything alone
  auto x1 = make_tensor<float>({B, S, S, 3}, x->data);
  auto y1 = smooth_labels<float>({0, 1}, 2, 0.0f);
  const double one = cutmix_batch(x1, y1, perm, 1.0, rng);
  CHECK(one == 1.0);
  for (std::size_t i = 0; i < x->data.size(); ++i)
    CHECK(x1->data[i] == x->data[i]);
  CHECK(y1->data[0] == 1.0f);
}

TEST_CASE("an unclipped full cutmix box swaps the pair outright") {
  const int B = 2, S = 4;
  std::vector<int> perm = {1, 0};
  // scan seeds for a draw whose box covers the whole image
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    Rng rng(seed);
    auto x = make_tensor<float>({B, S, S, 3});
    for (int e = 0; e < S * S * 3; ++e) {
      x->data[(std::size_t)e] = 1.0f;
      x->data[std::size_t(S * S * 3 + e)] = 2.0f;
    }
    auto y = smooth_labels<float>({0, 1}, 2, 0.0f);
    if (cutmix_batch(x, y, perm, 0.0, rng) != 0.0) continue;
    for (int e = 0; e < S * S * 3; ++e) {
      CHECK(x->data[(std::size_t)e] == 2.0f);
      CHECK(x->data[std::size_t(S * S * 3 + e)] == 1.0f);
    }
    CHECK(y->data[1] == 1.0f);
    CHECK(y->data[2] == 1.0f);
    return;
  }
  FAIL("no seed produced an unclipped full box");
}

TEST_CASE("random erasing stays inside one box of bounded area") {
  Rng rng(23);
  Image img{32, 32, std::vector<float>(32 * 32 * 3, 0.5f)};

  Image same = img;
  CHECK_FALSE(random_erase(same, 0.0, rng));
  for (std::size_t i = 0; i < img.px.size(); ++i)
    CHECK(same.px[i] == img.px[i]);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r1(seed), r2(seed);
    Image a = img, b = img;
    CHECK(random_erase(a, 1.0, r1));
    random_erase(b, 1.0, r2);
    for (std::size_t i = 0; i < a.px.size(); ++i) CHECK(a.px[i] == b.px[i]);

    int y_lo = 32, y_hi = -1, x_lo = 32, x_hi = -1;
    long changed = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (a.at(y, x)[0] != 0.5f || a.at(y, x)[1] != 0.5f ||
            a.at(y, x)[2] != 0.5f) {
          ++changed;
          y_lo = std::min(y_lo, y);
          y_hi = std::max(y_hi, y);
          x_lo = std::min(x_lo, x);
          x_hi = std::max(x_hi, x);
        }
    const double frac = double(changed) / (32.0 * 32.0);
    CHECK(frac >= 0.02);
    CHECK(frac <= 0.33);
    CHECK(changed == long(y_hi - y_lo + 1) * (x_hi - x_lo + 1));
    for (auto v : a.px) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  CHECK_THROWS_WITH_AS(random_erase(img, 1.5, rng),
                       doctest::Contains("[0,1]"), std::runtime_error);
}

TEST_CASE("pad-crop keeps size, zero-fills borders, and can be the identity") {
  Image img{8, 8, {}};
  img.px.resize(8 * 8 * 3);
  for (std::size_t i = 0; i < img.px.size(); ++i)
    img.px[i] = float(i % 97) / 97.0f + 0.01f;

  auto centered = pad_crop(img, 4, 4, 4);
  for (std::size_t i = 0; i < img.px.size(); ++i)
    CHECK(centered.px[i] == img.px[i]);

  auto corner = pad_crop(img, 4, 0, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) CHECK(corner.at(y, x)[c] == 0.0f);
  // surviving content shifts down-right by the pad amount
  CHECK(corner.at(4, 4)[0] == img.at(0, 0)[0]);
  CHECK(corner.at(7, 7)[2] == img.at(3, 3)[2]);

  CHECK_THROWS_WITH_AS(pad_crop(img, 4, 9, 0), doctest::Contains("[0, 2*pad]"),
                       std::runtime_error);

  Rng r1(5), r2(5);
  auto f1 = pad_crop_flip(img, 4, r1), f2 = pad_crop_flip(img, 4, r2);
  CHECK(f1.h == 8);
  CHECK(f1.w == 8);
  for (std::size_t i = 0; i < f1.px.size(); ++i) CHECK(f1.px[i] == f2.px[i]);
}

TEST_CASE("top-1 accuracy counts argmax hits with ties to the lower index") {
  auto logits = make_tensor<float>(
      {5, 3}, {0.9f, 0.1f, 0.0f,    // -> 0
               0.2f, 0.2f, 0.1f,    // tie -> 0
               0.0f, 0.3f, 0.9f,    // -> 2
               0.5f, 0.5f, 0.5f,    // tie -> 0
               0.1f, 0.8f, 0.2f});  // -> 1
  CHECK(top1(logits, {0, 0, 2, 0, 1}) == 1.0);
  CHECK(top1(logits, {0, 1, 2, 1, 1}) == 0.6);

  // constant rows on a balanced set land at 1/k
  auto flat = make_tensor<float>({4, 4}, std::vector<float>(16, 0.25f));
  CHECK(top1(flat, {0, 1, 2, 3}) == 0.25);

  auto empty = make_tensor<float>({0, 3});
  CHECK_THROWS_WITH_AS(top1(empty, {}), doctest::Contains("empty"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(top1(logits, {0, 1}), doctest::Contains("5 rows"),
                       std::runtime_error);
}

TEST_CASE("mean corruption error is the plain average") {
  CHECK(mce({40.0}) == 40.0);
  CHECK(mce({20.0, 40.0}) == 30.0);

  Rng rng(71);
  std::vector<double> errs;
  long double want = 0;
  for (int i = 0; i < 18; ++i) {
    errs.push_back(100.0 * rng.uniform());
    want += (long double)errs.back();
  }
  want /= 18;
  CHECK(std::abs((long double)mce(errs) - want) < 1e-9L);
  CHECK_THROWS_WITH_AS(mce({}), doctest::Contains("no corruption sets"),
                       std::runtime_error);
}

TEST_CASE("soft targets survive smoothing, mixup, and cutmix composed") {
  Rng rng(37);
  const int B = 6, S = 8, k = 4;
  auto x = make_tensor<float>({B, S, S, 3});
  for (auto& v : x->data) v = float(rng.uniform());
  std::vector<int> labels, perm;
  for (int i = 0; i < B; ++i) labels.push_back(int(rng.randint(k)));
  for (int i = 0; i < B; ++i) perm.push_back((i + 2) % B);

  auto y = smooth_labels<float>(labels, k, 0.1f);
  mixup_batch(x, y, perm, 0.37f);
  cutmix_batch(x, y, perm, detail::beta_symmetric(rng, 1.0), rng);
  for (int i = 0; i < B; ++i) {
    double s = 0;
    for (int j = 0; j < k; ++j) s += double(y->data[std::size_t(i) * k + j]);
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("zero-epoch finetune keeps the transferred weights and scores chance") {
  auto ck = tiny_ssl_checkpoint(0);
  auto data = synthetic_dataset(4, 10, 5, 16);
  FinetuneConfig fc;
  fc.epochs = 0;
  auto res = finetune<float>(data, tiny_vit(), fc, &ck, 31);
  CHECK(res.metrics.empty());
  CHECK(res.final_top1 >= 0.0);
  CHECK(res.final_top1 <= 0.6);  // random head on 5 classes sits near 0.2
  CHECK(res.best.find("patch.w") != nullptr);
  CHECK(res.best.find("head.w") != nullptr);

  // backbone untouched by the load->snapshot round trip
  for (auto& p : res.vit.params()) {
    const auto* e = ck.find("teacher." + p.name);
    REQUIRE(e != nullptr);
    for (std::size_t i = 0; i < e->data.size(); ++i)
      CHECK(e->data[i] == p.t->data[i]);
  }

  FinetuneConfig missing;
  missing.epochs = 0;
  CHECK_THROWS_WITH_AS(finetune<float>(data, tiny_vit(), missing, nullptr, 31),
                       doctest::Contains("usage error"), std::runtime_error);
}

TEST_CASE("short finetune is deterministic per seed") {
  auto data = synthetic_dataset(6, 8, 2, 16);
  FinetuneConfig fc;
  fc.epochs = 2;
  fc.batch = 8;
  fc.init = "truncated-normal";
  fc.mix_prob = 1.0;  // force the mixing path
  auto a = finetune<float>(data, tiny_vit(), fc, nullptr, 5);
  auto b = finetune<float>(data, tiny_vit(), fc, nullptr, 5);
  REQUIRE(a.metrics.size() == 2);
  REQUIRE(b.metrics.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(a.metrics[i].train_loss == b.metrics[i].train_loss);
    CHECK(a.metrics[i].test_top1 == b.metrics[i].test_top1);
    CHECK(std::isfinite(a.metrics[i].train_loss));
  }
  auto pa = a.params(), pb = b.params();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t j = 0; j < pa[i].t->data.size(); ++j)
      CHECK(pa[i].t->data[j] == pb[i].t->data[j]);

  auto c = finetune<float>(data, tiny_vit(), fc, nullptr, 6);
  bool differs = false;
  auto pc = c.params();
  for (std::size_t i = 0; i < pa.size() && !differs; ++i)
    for (std::size_t j = 0; j < pa[i].t->data.size() && !differs; ++j)
      differs = pa[i].t->data[j] != pc[i].t->data[j];
  CHECK(differs);
}

TEST_CASE("a tiny model memorizes a tiny training set without augmentation") {
  auto data = synthetic_dataset(8, 8, 2, 16);  // 16 train images
  ViTConfig vc = tiny_vit();
  vc.dim = 32;
  FinetuneConfig fc;
  fc.epochs = 40;
  fc.batch = 16;
  fc.lr = 0.003;
  fc.weight_decay = 0.0;
  fc.label_smoothing = 0.0;
  fc.augment = false;
  fc.mix_prob = 0.0;
  fc.erase_prob = 0.0;
  fc.init = "truncated-normal";
  auto res = finetune<float>(data, vc, fc, nullptr, 9);
  const double train_acc = evaluate_top1(res.vit, res.head, data.train,
                                         data.mean, data.stdev, 16);
  CHECK(train_acc == 1.0);
  // loss should have collapsed well below chance level ln 2
  CHECK(res.metrics.back().train_loss < 0.2);
}

TEST_CASE("finetune metrics rows round-trip through the csv writer") {
  std::vector<FinetuneMetrics> rows(2);
  rows[0] = {0, 1.75, 0.5, 0.002};
  rows[1] = {1, 0.9, 0.625, 0.0015};
  const std::string path = "finetune_metrics_test.csv";
  write_finetune_csv(path, rows);
  std::ifstream f(path);
  REQUIRE(bool(f));
  std::string header, r0, r1;
  std::getline(f, header);
  std::getline(f, r0);
  std::getline(f, r1);
  CHECK(header == "epoch,train_loss,test_top1,lr");
  CHECK(r0 == "0,1.75,0.5,0.002");
  CHECK(r1 == "1,0.9,0.625,0.0015");
  std::remove(path.c_str());
}
