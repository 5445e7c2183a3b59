#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ccl/diff.hpp"
#include "ccl/encoders.hpp"
#include "ccl/rng.hpp"
#include "ccl/worldgen.hpp"

using namespace ccl;
using namespace ccl::enc;

namespace {

VisualConfig small_visual() {
  VisualConfig cfg;
  cfg.grid_h = cfg.grid_w = 8;
  cfg.feat_dim = 4;
  cfg.patch = 4;
  cfg.layers = 3;
  cfg.width = 16;
  return cfg;
}

std::vector<double> random_view(const VisualConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(cfg.grid_h) * cfg.grid_w * cfg.feat_dim);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST_CASE("visual encoder is deterministic and its weights hash stably") {
  VisualConfig cfg = small_visual();
  VisualEncoder a = make_visual_encoder(cfg);
  VisualEncoder b = make_visual_encoder(cfg);
  CHECK(a.weight_hash() == b.weight_hash());

  cfg.seed += 1;
  VisualEncoder c = make_visual_encoder(cfg);
  CHECK(a.weight_hash() != c.weight_hash());

  auto view = random_view(a.cfg, 11);
  diff::Tape t1, t2;
  VisualOut o1 = encode_view(a, t1, view);
  VisualOut o2 = encode_view(a, t2, view);
  CHECK(o1.cls.values() == o2.cls.values());
  CHECK(o1.patches.values() == o2.patches.values());
  CHECK(o1.cls.shape == diff::Shape{1, a.cfg.width});
  CHECK(o1.patches.shape == diff::Shape{a.cfg.tokens() - 1, a.cfg.width});
  CHECK(static_cast<int>(o1.per_layer.size()) == a.cfg.layers);
}

TEST_CASE("identity hooks reproduce the no-hook visual output") {
  VisualEncoder enc = make_visual_encoder(small_visual());
  auto view = random_view(enc.cfg, 3);
  diff::Tape t1, t2;
  VisualOut plain = encode_view(enc, t1, view);
  LayerHook identity = [](diff::Tape&, const diff::Tensor& x, int) { return x; };
  VisualOut hooked = encode_view(enc, t2, view, identity);
  CHECK(plain.cls.values() == hooked.cls.values());
  CHECK(plain.patches.values() == hooked.patches.values());
}

TEST_CASE("zero input grid yields the bias-path response, identical across calls") {
  VisualEncoder enc = make_visual_encoder(small_visual());
  std::vector<double> zeros(
      static_cast<size_t>(enc.cfg.grid_h) * enc.cfg.grid_w * enc.cfg.feat_dim, 0.0);
  diff::Tape t1, t2;
  VisualOut o1 = encode_view(enc, t1, zeros);
  VisualOut o2 = encode_view(enc, t2, zeros);
  CHECK(o1.cls.values() == o2.cls.values());
  // The cls token plus position code still pass through the mixer, so the
  // response is structured, not zero.
  double mag = 0.0;
  for (double v : o1.cls.values()) mag += std::abs(v);
  CHECK(mag > 0.0);
}

TEST_CASE("hooks feed gradients back to their leaves") {
  VisualEncoder enc = make_visual_encoder(small_visual());
  auto view = random_view(enc.cfg, 17);

  auto loss_at = [&](double theta, diff::Tape& tape, diff::Tensor* leaf_out) {
    diff::Tensor leaf = tape.leaf({1}, {theta}, "theta");
    if (leaf_out) *leaf_out = leaf;
    LayerHook hook = [&](diff::Tape& t, const diff::Tensor& x, int) {
      return diff::scale(t, leaf, x);
    };
    VisualOut out = encode_view(enc, tape, view, hook);
    return diff::sum(tape, out.cls);
  };

  diff::Tape tape;
  diff::Tensor leaf;
  diff::Tensor loss = loss_at(1.0, tape, &leaf);
  tape.backward(loss);
  double analytic = tape.grad(leaf)[0];

  double eps = 1e-6;
  diff::Tape tp, tm;
  double plus = loss_at(1.0 + eps, tp, nullptr).scalar();
  double minus = loss_at(1.0 - eps, tm, nullptr).scalar();
  double fd = (plus - minus) / (2 * eps);
  CHECK(analytic == doctest::Approx(fd).epsilon(1e-5));
}

TEST_CASE("view sizes and patching are validated") {
  VisualConfig cfg = small_visual();
  cfg.patch = 3;  // does not divide 8
  CHECK_THROWS_AS(make_visual_encoder(cfg), EncoderError);

  VisualEncoder enc = make_visual_encoder(small_visual());
  std::vector<double> wrong(10, 0.0);
  diff::Tape tape;
  CHECK_THROWS_AS(encode_view(enc, tape, wrong), EncoderError);
}

TEST_CASE("make_views partitions the observation") {
  world::WorldSpec spec;
  spec.n_subjects = 6;
  spec.n_contexts = 8;
  spec.grid_h = spec.grid_w = 12;
  spec.feat_dim = 6;
  world::World w = world::build_world(spec);
  world::Observation obs = world::render(w, 1, 2, 9);

  ViewTriple v = make_views(spec, obs);
  REQUIRE(v.global == obs.x);
  REQUIRE(v.subject.size() == obs.x.size());
  for (size_t i = 0; i < obs.x.size(); ++i)
    CHECK(v.subject[i] + v.context[i] == obs.x[i]);

  // Direct elementwise-multiply oracle over a checkerboard mask.
  world::Observation board = obs;
  for (int y = 0; y < spec.grid_h; ++y)
    for (int x = 0; x < spec.grid_w; ++x)
      board.mask[static_cast<size_t>(y) * spec.grid_w + x] =
          static_cast<uint8_t>((y + x) % 2);
  ViewTriple vb = make_views(spec, board);
  for (size_t cell = 0; cell < board.mask.size(); ++cell)
    for (int ch = 0; ch < spec.feat_dim; ++ch) {
      size_t i = cell * spec.feat_dim + ch;
      CHECK(vb.subject[i] == board.mask[cell] * board.x[i]);
      CHECK(vb.context[i] == (1 - board.mask[cell]) * board.x[i]);
    }
}

TEST_CASE("upper-half mask zeroes the complementary halves") {
  world::WorldSpec spec;
  spec.n_subjects = 6;
  spec.n_contexts = 8;
  spec.grid_h = spec.grid_w = 8;
  spec.feat_dim = 4;
  world::World w = world::build_world(spec);
  world::Observation obs = world::render(w, 0, 0, 1);
  for (int y = 0; y < spec.grid_h; ++y)
    for (int x = 0; x < spec.grid_w; ++x)
      obs.mask[static_cast<size_t>(y) * spec.grid_w + x] =
          static_cast<uint8_t>(y < spec.grid_h / 2);

  ViewTriple v = make_views(spec, obs);
  for (int y = 0; y < spec.grid_h; ++y)
    for (int x = 0; x < spec.grid_w; ++x)
      for (int ch = 0; ch < spec.feat_dim; ++ch) {
        size_t i = (static_cast<size_t>(y) * spec.grid_w + x) * spec.feat_dim + ch;
        if (y < spec.grid_h / 2)
          CHECK(v.context[i] == 0.0);
        else
          CHECK(v.subject[i] == 0.0);
      }
}

TEST_CASE("degenerate masks are rejected") {
  world::WorldSpec spec;
  spec.n_subjects = 6;
  spec.n_contexts = 8;
  spec.grid_h = spec.grid_w = 8;
  spec.feat_dim = 4;
  world::World w = world::build_world(spec);
  world::Observation obs = world::render(w, 0, 0, 1);

  std::fill(obs.mask.begin(), obs.mask.end(), uint8_t{1});
  CHECK_THROWS_AS(make_views(spec, obs), EncoderError);
  std::fill(obs.mask.begin(), obs.mask.end(), uint8_t{0});
  CHECK_THROWS_AS(make_views(spec, obs), EncoderError);
}

TEST_CASE("text encoder pools to unit norm") {
  TextEncoder enc = make_text_encoder(TextConfig{});
  diff::Tape tape;
  TextOut out = encode_text(enc, tape, "a photo of a runner in a library");
  REQUIRE(out.pooled.shape == diff::Shape{1, enc.cfg.width});
  double n2 = 0.0;
  for (double v : out.pooled.values()) n2 += v * v;
  CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-12);
}

TEST_CASE("identity text hooks equal the frozen output") {
  TextEncoder enc = make_text_encoder(TextConfig{});
  diff::Tape t1, t2;
  TextOut plain = encode_text(enc, t1, "an unusual scene");
  LayerHook identity = [](diff::Tape&, const diff::Tensor& x, int) { return x; };
  TextOut hooked = encode_text(enc, t2, "an unusual scene", identity);
  CHECK(plain.pooled.values() == hooked.pooled.values());
}

TEST_CASE("distinct prompts embed distinctly over a template corpus") {
  TextEncoder enc = make_text_encoder(TextConfig{});
  std::vector<std::string> prompts = {
      "a photo of a {cls} in its usual place",
      "a {cls} where it belongs",
      "an ordinary scene with a {cls}",
      "a photo of a {cls} somewhere surprising",
      "a {cls} out of place",
      "an odd location for a {cls}",
  };
  std::vector<std::vector<double>> embs;
  for (const auto& p : prompts) {
    diff::Tape tape;
    embs.push_back(encode_text(enc, tape, p).pooled.values());
  }
  for (size_t i = 0; i < embs.size(); ++i)
    for (size_t j = i + 1; j < embs.size(); ++j) {
      double d2 = 0.0;
      for (size_t k = 0; k < embs[i].size(); ++k) {
        double d = embs[i][k] - embs[j][k];
        d2 += d * d;
      }
      CHECK(d2 > 1e-8);
    }
}

TEST_CASE("tokenizer hashes words case-insensitively and rejects empty text") {
  TextConfig cfg;
  auto a = tokenize(cfg, "A Photo, of a RUNNER!");
  auto b = tokenize(cfg, "a photo of a runner");
  CHECK(a == b);
  REQUIRE(a.size() == 5);
  for (int id : a) {
    CHECK(id >= 0);
    CHECK(id < cfg.vocab);
  }
  CHECK(a[0] == a[3]);  // both "a"
  CHECK_THROWS_AS(tokenize(cfg, "  ... "), EncoderError);
}

TEST_CASE("text encoder weights hash stably") {
  TextConfig cfg;
  CHECK(make_text_encoder(cfg).weight_hash() == make_text_encoder(cfg).weight_hash());
  cfg.seed ^= 0xff;
  CHECK(make_text_encoder(cfg).weight_hash() !=
        make_text_encoder(TextConfig{}).weight_hash());
}
