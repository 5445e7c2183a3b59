#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ccl/crm.hpp"
#include "ccl/diff.hpp"
#include "ccl/model.hpp"
#include "ccl/objective.hpp"
#include "ccl/rng.hpp"
#include "ccl/worldgen.hpp"

using namespace ccl;

namespace {

// Hand cross-entropy over two logits via a shifted log-sum-exp.
double ce_oracle(double l0, double l1, int y) {
  double m = std::max(l0, l1);
  double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
  return lse - (y == 0 ? l0 : l1);
}

diff::Tensor logit_row(double l0, double l1) {
  return diff::constant({1, 2}, {l0, l1});
}

text::TextPair axis_pair(int d, int i0, int i1) {
  std::vector<double> a(d, 0.0), b(d, 0.0);
  a[static_cast<size_t>(i0)] = 1.0;
  b[static_cast<size_t>(i1)] = 1.0;
  text::TextPair p;
  p.t0 = diff::constant({1, d}, std::move(a));
  p.t1 = diff::constant({1, d}, std::move(b));
  return p;
}

csr::BranchBundle bundle_of(std::vector<double> s, std::vector<double> c,
                            std::vector<double> g) {
  int d = static_cast<int>(s.size());
  csr::BranchBundle b;
  b.cls_s = diff::constant({1, d}, std::move(s));
  b.cls_c = diff::constant({1, d}, std::move(c));
  b.cls_g = diff::constant({1, d}, std::move(g));
  return b;
}

std::vector<double> axis(int d, int i) {
  std::vector<double> v(d, 0.0);
  v[static_cast<size_t>(i)] = 1.0;
  return v;
}

// A fusion result assembled by hand; only the fields the losses read.
crm::FusionResult handmade_fusion(std::vector<std::vector<double>> branch_logits,
                                  std::vector<double> fused_logits,
                                  std::vector<double> alpha) {
  crm::FusionResult fr;
  for (auto& row : branch_logits)
    fr.branch_logits.push_back(diff::constant({1, 2}, std::move(row)));
  fr.fused_logits = diff::constant({1, 2}, std::move(fused_logits));
  int n = static_cast<int>(alpha.size());
  fr.alpha = diff::constant({1, n}, std::move(alpha));
  return fr;
}

const std::vector<csr::Branch> kAllBranches = {
    csr::Branch::kSubject, csr::Branch::kContext, csr::Branch::kGlobal};

}  // namespace

TEST_CASE("tied similarity logits cost ln 2 for either label") {
  diff::Tape tape;
  for (int y : {0, 1}) {
    diff::Tensor ce = obj::loss_branch_ce(tape, logit_row(0.5, 0.5), y);
    CHECK(ce.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
}

TEST_CASE("confidently separated logits cost ln(1 + e^-2)") {
  diff::Tape tape;
  diff::Tensor ce = obj::loss_branch_ce(tape, logit_row(-1.0, 1.0), 1);
  CHECK(ce.scalar() ==
        doctest::Approx(std::log(1.0 + std::exp(-2.0))).epsilon(1e-12));
}

TEST_CASE("branch cross-entropy matches the log-sum-exp oracle on random logits") {
  std::mt19937_64 rng(411);
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  diff::Tape tape;
  for (int i = 0; i < 50; ++i) {
    double l0 = unif(rng), l1 = unif(rng);
    int y = static_cast<int>(rng() % 2);
    diff::Tensor ce = obj::loss_branch_ce(tape, logit_row(l0, l1), y);
    CHECK(std::abs(ce.scalar() - ce_oracle(l0, l1, y)) < 1e-12);
  }
}

TEST_CASE("temperature divides the logits before the softmax") {
  diff::Tape tape;
  diff::Tensor hot = obj::loss_branch_ce(tape, logit_row(2.0, -1.0), 0, 2.0);
  diff::Tensor ref = obj::loss_branch_ce(tape, logit_row(1.0, -0.5), 0, 1.0);
  CHECK(hot.scalar() == doctest::Approx(ref.scalar()).epsilon(1e-15));

  CHECK_THROWS_AS(obj::loss_branch_ce(tape, logit_row(1.0, 2.0), 0, 0.0),
                  obj::ObjectiveError);
  CHECK_THROWS_AS(
      obj::loss_branch_ce(tape, diff::constant({1, 3}, {1.0, 2.0, 3.0}), 0),
      obj::ObjectiveError);
}

TEST_CASE("consistency term vanishes when fused logits equal the branch mean") {
  // Mirror the graph's float arithmetic exactly: left-to-right sum, then one
  // multiply by 1/3.
  double m0 = ((0.9 + 0.5) + 0.1) * (1.0 / 3.0);
  double m1 = ((0.1 + 0.5) + 0.3) * (1.0 / 3.0);
  crm::FusionResult fr = handmade_fusion(
      {{0.9, 0.1}, {0.5, 0.5}, {0.1, 0.3}}, {m0, m1},
      {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  diff::Tape tape;
  obj::ImgTerms t = obj::loss_img_terms(tape, fr, 0, {});
  CHECK(t.consistency == 0.0);
}

TEST_CASE("uniform attention contributes the maximum-entropy bonus") {
  crm::FusionResult fr = handmade_fusion(
      {{0.9, 0.1}, {0.5, 0.5}, {0.1, 0.3}}, {0.4, 0.2},
      {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0});
  diff::Tape tape;
  obj::ImgLossWeights with_ent;  // defaults: ent weight 0.05
  obj::ImgLossWeights no_ent = with_ent;
  no_ent.fuse_ent = 0.0;
  obj::ImgTerms a = obj::loss_img_terms(tape, fr, 1, with_ent);
  obj::ImgTerms b = obj::loss_img_terms(tape, fr, 1, no_ent);
  CHECK(a.neg_entropy == doctest::Approx(-std::log(3.0)).epsilon(1e-12));
  CHECK(a.total.scalar() - b.total.scalar() ==
        doctest::Approx(-0.05 * std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("image loss matches a term-by-term hand evaluation") {
  std::vector<std::vector<double>> logits = {{0.7, -0.2}, {0.1, 0.4}, {-0.3, 0.6}};
  std::vector<double> fused = {0.2, 0.5};
  std::vector<double> alpha = {0.5, 0.3, 0.2};
  crm::FusionResult fr = handmade_fusion(logits, fused, alpha);

  obj::ImgLossWeights w;  // 1.0 / 0.5 / 0.05
  for (int y : {0, 1}) {
    double ce_branches = 0.0;
    for (const auto& l : logits) ce_branches += ce_oracle(l[0], l[1], y);
    double ce_fused = ce_oracle(fused[0], fused[1], y);
    double cons = 0.0;
    for (int k = 0; k < 2; ++k) {
      double mean_k = (logits[0][k] + logits[1][k] + logits[2][k]) / 3.0;
      cons += (fused[k] - mean_k) * (fused[k] - mean_k);
    }
    double ent = 0.0;
    for (double a : alpha) ent -= a * std::log(a);
    double expect = ce_branches + w.fuse_img * ce_fused + w.fuse_cons * cons +
                    w.fuse_ent * (-ent);

    diff::Tape tape;
    obj::ImgTerms t = obj::loss_img_terms(tape, fr, y, w);
    CHECK(t.total.scalar() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(t.ce_branches == doctest::Approx(ce_branches).epsilon(1e-12));
    CHECK(t.ce_fused == doctest::Approx(ce_fused).epsilon(1e-12));
    CHECK(t.consistency == doctest::Approx(cons).epsilon(1e-12));
    CHECK(t.neg_entropy == doctest::Approx(-ent).epsilon(1e-12));
  }
}

TEST_CASE("temperature touches the cross-entropies but not the consistency term") {
  crm::FusionResult fr = handmade_fusion({{0.8, -0.1}, {0.2, 0.6}}, {0.3, 0.1},
                                         {0.6, 0.4});
  diff::Tape tape;
  obj::ImgTerms cold = obj::loss_img_terms(tape, fr, 0, {}, 1.0);
  obj::ImgTerms warm = obj::loss_img_terms(tape, fr, 0, {}, 2.0);
  CHECK(warm.consistency == cold.consistency);
  CHECK(warm.neg_entropy == cold.neg_entropy);
  CHECK(warm.ce_fused == doctest::Approx(ce_oracle(0.15, 0.05, 0)).epsilon(1e-12));
}

TEST_CASE("mean-logit normalization follows the active branch count") {
  // Two branches: the mean divides by 2, so their midpoint zeroes the term.
  double m0 = (0.8 + 0.2) * 0.5, m1 = (-0.1 + 0.6) * 0.5;
  crm::FusionResult fr =
      handmade_fusion({{0.8, -0.1}, {0.2, 0.6}}, {m0, m1}, {0.5, 0.5});
  diff::Tape tape;
  obj::ImgTerms t = obj::loss_img_terms(tape, fr, 1, {});
  CHECK(t.consistency == 0.0);
}

TEST_CASE("degenerate or misweighted image losses are rejected") {
  diff::Tape tape;
  crm::FusionResult empty;
  CHECK_THROWS_AS(obj::loss_img_terms(tape, empty, 0, {}), obj::ObjectiveError);

  crm::FusionResult fr = handmade_fusion({{0.1, 0.2}}, {0.1, 0.2}, {1.0});
  obj::ImgLossWeights bad;
  bad.fuse_cons = -0.5;
  CHECK_THROWS_AS(obj::loss_img_terms(tape, fr, 0, bad), obj::ObjectiveError);
}

TEST_CASE("total loss is the plain sum of the image and text parts") {
  diff::Tape tape;
  CHECK(obj::loss_total(tape, diff::constant_scalar(0.0),
                        diff::constant_scalar(0.0))
            .scalar() == 0.0);
  CHECK(obj::loss_total(tape, diff::constant_scalar(1.5),
                        diff::constant_scalar(0.25))
            .scalar() == 1.75);
  CHECK_THROWS_AS(obj::loss_total(tape, diff::constant({1, 2}, {1.0, 2.0}),
                                  diff::constant_scalar(0.0)),
                  obj::ObjectiveError);
}

// ---------------------------------------------------------------------------
// Fusion baselines

TEST_CASE("averaging identical branches matches crm fusion exactly") {
  int d = 6;
  std::vector<double> v = {0.4, -1.2, 0.7, 0.1, -0.5, 2.0};
  csr::BranchBundle bundle = bundle_of(v, v, v);
  text::TextPair pair = axis_pair(d, 0, 1);

  diff::ParamStore store;
  crm::CrmConfig cfg;
  cfg.width = d;
  cfg.attn = 5;
  cfg.seed = 77;
  crm::add_crm_params(store, cfg);

  diff::Tape tape;
  crm::FusionResult via_crm =
      crm::fuse(tape, store, cfg, bundle, pair, kAllBranches);
  crm::FusionResult via_avg = obj::fuse_baseline(
      tape, store, model::Fusion::kAverage, bundle, pair, kAllBranches);

  REQUIRE(via_avg.alpha.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(via_avg.alpha.values()[i] == 1.0 / 3.0);
    CHECK(via_crm.alpha.values()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  for (int i = 0; i < d; ++i)
    CHECK(via_avg.fused.values()[i] ==
          doctest::Approx(via_crm.fused.values()[i]).epsilon(1e-14));
  for (int k = 0; k < 2; ++k)
    CHECK(via_avg.fused_logits.values()[k] ==
          doctest::Approx(via_crm.fused_logits.values()[k]).epsilon(1e-14));
}

TEST_CASE("zero-initialized static weights reproduce plain averaging") {
  int d = 6;
  csr::BranchBundle bundle =
      bundle_of({1.0, 0.2, 0.0, -0.3, 0.5, 0.0}, {0.0, 1.5, -0.7, 0.2, 0.0, 0.9},
                {-0.4, 0.0, 1.1, 0.6, -0.2, 0.3});
  text::TextPair pair = axis_pair(d, 2, 4);

  diff::ParamStore store;
  store.add("fuse.static", {3}, std::vector<double>(3, 0.0));

  diff::Tape tape;
  crm::FusionResult via_static = obj::fuse_baseline(
      tape, store, model::Fusion::kStaticWeights, bundle, pair, kAllBranches);
  crm::FusionResult via_avg = obj::fuse_baseline(
      tape, store, model::Fusion::kAverage, bundle, pair, kAllBranches);

  for (int i = 0; i < 3; ++i)
    CHECK(via_static.alpha.values()[i] ==
          doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  for (int i = 0; i < d; ++i)
    CHECK(via_static.fused.values()[i] ==
          doctest::Approx(via_avg.fused.values()[i]).epsilon(1e-14));
}

TEST_CASE("identity-block concat weights reproduce the first branch") {
  int d = 5, n = 3;
  csr::BranchBundle bundle =
      bundle_of({2.0, -1.0, 0.5, 0.0, 1.5}, {0.3, 0.9, -0.2, 1.1, 0.0},
                {-0.7, 0.4, 0.8, -0.5, 0.2});
  text::TextPair pair = axis_pair(d, 1, 3);

  diff::ParamStore store;
  std::vector<double> w(static_cast<size_t>(n) * d * d, 0.0);
  for (int i = 0; i < d; ++i) w[static_cast<size_t>(i) * d + i] = 1.0;
  store.add("fuse.concat", {n * d, d}, std::move(w));

  diff::Tape tape;
  crm::FusionResult fr = obj::fuse_baseline(
      tape, store, model::Fusion::kConcatLinear, bundle, pair, kAllBranches);
  diff::Tensor z_s = diff::l2_normalize(tape, bundle.cls_s);
  for (int i = 0; i < d; ++i)
    CHECK(fr.fused.values()[i] == z_s.values()[i]);
  for (int k = 0; k < 2; ++k)
    CHECK(fr.fused_logits.values()[k] == fr.branch_logits[0].values()[k]);
}

TEST_CASE("baseline misconfigurations are rejected") {
  int d = 4;
  csr::BranchBundle bundle =
      bundle_of(axis(d, 0), axis(d, 1), axis(d, 2));
  text::TextPair pair = axis_pair(d, 0, 1);
  diff::ParamStore store;
  diff::Tape tape;

  CHECK_THROWS_AS(obj::fuse_baseline(tape, store, model::Fusion::kCrm, bundle,
                                     pair, kAllBranches),
                  obj::ObjectiveError);
  CHECK_THROWS_AS(obj::fuse_baseline(tape, store, model::Fusion::kAverage,
                                     bundle, pair, {}),
                  obj::ObjectiveError);
  CHECK_THROWS_AS(obj::fuse_baseline(tape, store, model::Fusion::kStaticWeights,
                                     bundle, pair, kAllBranches),
                  obj::ObjectiveError);
  CHECK_THROWS_AS(obj::fuse_baseline(tape, store, model::Fusion::kConcatLinear,
                                     bundle, pair, kAllBranches),
                  obj::ObjectiveError);

  store.add("fuse.static", {2}, {0.0, 0.0});  // three branches active
  CHECK_THROWS_AS(obj::fuse_baseline(tape, store, model::Fusion::kStaticWeights,
                                     bundle, pair, kAllBranches),
                  obj::ObjectiveError);
}

TEST_CASE("fuse_any dispatches on the configured strategy") {
  world::WorldSpec ws;
  ws.n_subjects = 1;
  ws.n_contexts = 2;
  ws.grid_h = ws.grid_w = 8;
  ws.feat_dim = 3;
  ws.explicit_compat = {{1, 0}};
  ws.seed = 5;
  world::World w = world::build_world(ws);
  world::Observation obs = world::render(w, 0, 0, 9);

  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.attn = 6;
  mc.fusion = model::Fusion::kAverage;
  model::Model m = model::build_model(mc, ws, 1);

  diff::Tape tape;
  csr::RefineOptions ropt;
  ropt.frozen = true;
  csr::BranchBundle bundle = model::refine(tape, m, obs, ropt);
  std::vector<text::TextPair> pairs = model::frozen_class_pairs(m);

  crm::FusionResult any = obj::fuse_any(tape, m, bundle, pairs[0], true);
  crm::FusionResult base =
      obj::fuse_baseline(tape, m.params, model::Fusion::kAverage, bundle,
                         pairs[0], m.cfg.active, true);
  for (int i = 0; i < mc.width; ++i)
    CHECK(any.fused.values()[i] == base.fused.values()[i]);

  m.cfg.fusion = model::Fusion::kCrm;
  crm::FusionResult via_any = obj::fuse_any(tape, m, bundle, pairs[0], true);
  crm::FusionResult via_crm = crm::fuse(tape, m.params, m.crm_cfg, bundle,
                                        pairs[0], m.cfg.active, true);
  for (int i = 0; i < mc.width; ++i)
    CHECK(via_any.fused.values()[i] == via_crm.fused.values()[i]);
}

// ---------------------------------------------------------------------------
// Regularizer directions

namespace {

// Branch embeddings on coordinate axes: scores are single rows of the key
// projection, so the regularizer tests control the geometry exactly.
struct CrmRig {
  diff::ParamStore store;
  crm::CrmConfig cfg;
  csr::BranchBundle bundle;
  text::TextPair pair;

  CrmRig() {
    cfg.width = 6;
    cfg.attn = 4;
    cfg.seed = 2211;
    crm::add_crm_params(store, cfg);
    bundle = bundle_of(axis(6, 0), axis(6, 1), axis(6, 2));
    pair = axis_pair(6, 0, 1);
  }
};

}  // namespace

TEST_CASE("entropy bonus alone drives the attention weights toward uniform") {
  CrmRig rig;
  // Spread the initial scores so the walk toward uniform is non-trivial.
  for (double& v : rig.store.values("crm.wk")) v *= 6.0;

  diff::OptimConfig oc;
  oc.lr = 2e-2;

  double h_init = 0.0, h = 0.0;
  for (int step = 0; step < 1500; ++step) {
    diff::Tape tape;
    crm::FusionResult fr = crm::fuse(tape, rig.store, rig.cfg, rig.bundle,
                                     rig.pair, kAllBranches);
    diff::Tensor ent = diff::entropy(tape, fr.alpha);
    h = ent.scalar();
    if (step == 0) h_init = h;
    diff::Tensor loss = diff::scale(tape, -1.0, ent);
    tape.backward(loss);
    diff::optimizer_step(rig.store, rig.store.collect_grads(tape), oc);
  }
  CHECK(h_init < std::log(3.0) - 0.01);
  CHECK(h > h_init);
  CHECK(std::abs(h - std::log(3.0)) < 1e-3);
}

TEST_CASE("consistency penalty alone pulls fused logits onto the branch mean") {
  CrmRig rig;

  diff::OptimConfig oc;
  oc.lr = 2e-2;

  double cons = 0.0, cons_init = 0.0;
  for (int step = 0; step < 3000; ++step) {
    diff::Tape tape;
    crm::FusionResult fr = crm::fuse(tape, rig.store, rig.cfg, rig.bundle,
                                     rig.pair, kAllBranches);
    diff::Tensor mean_logits = diff::scale(
        tape, 1.0 / 3.0,
        diff::add(tape, diff::add(tape, fr.branch_logits[0], fr.branch_logits[1]),
                  fr.branch_logits[2]));
    diff::Tensor loss = diff::sq_l2_dist(tape, fr.fused_logits, mean_logits);
    cons = loss.scalar();
    if (step == 0) cons_init = loss.scalar();
    tape.backward(loss);
    diff::optimizer_step(rig.store, rig.store.collect_grads(tape), oc);
  }
  CHECK(cons_init > 1e-3);
  CHECK(cons < 1e-6);
}

// ---------------------------------------------------------------------------
// Full-objective gradient check

TEST_CASE("full objective gradients match central finite differences") {
  world::WorldSpec ws;
  ws.n_subjects = 1;
  ws.n_contexts = 2;
  ws.grid_h = ws.grid_w = 8;
  ws.feat_dim = 3;
  ws.explicit_compat = {{1, 0}};
  ws.seed = 31;
  world::World w = world::build_world(ws);
  std::vector<world::Observation> batch = {world::render(w, 0, 0, 1),
                                           world::render(w, 0, 1, 2)};
  batch[1].label = 1;
  REQUIRE(batch[0].label == 0);
  REQUIRE(batch[1].label == 1);

  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.attn = 6;
  mc.seed = 5150;
  model::Model m = model::build_model(mc, ws, 1);

  // Check at a generic point. The exact-init point is degenerate: with
  // zero-initialized adapter output layers the deepest adapter reduces to a
  // uniform token rescale, which every normalized-similarity term ignores,
  // so those gate gradients are structurally zero and finite differences
  // measure nothing but rounding noise there. The perturbation is sized to
  // lift every gradient entry well above that noise floor.
  Rng noise(913);
  for (const auto& name : m.params.names())
    for (double& v : m.params.values(name)) v += 0.4 * noise.normal();

  // The grounding target is a stop-gradient input within a step; freeze it
  // before the check so the finite differences see the same constant.
  std::vector<double> proto;
  {
    diff::Tape t0;
    diff::NoGradGuard ng(t0);
    csr::RefineOptions opt;
    opt.frozen = true;
    proto = model::refine(t0, m, batch[0], opt).cls_g.values();
  }

  diff::LossFn fn = [&](diff::Tape& tape, diff::ParamStore&) {
    text::TextPair pair = model::class_pair(tape, m, 0, false);
    diff::Tensor v = diff::constant({1, static_cast<int>(proto.size())}, proto);
    diff::Tensor text_loss =
        text::loss_text_total(tape, pair, v, m.cfg.text_weights, 1.0);

    std::vector<diff::Tensor> sample_losses;
    for (const world::Observation& obs : batch) {
      csr::RefineOptions ropt;
      ropt.training = true;
      csr::BranchBundle bundle = model::refine(tape, m, obs, ropt);
      crm::FusionResult fr = obj::fuse_any(tape, m, bundle, pair, false);
      sample_losses.push_back(
          obj::loss_img_total(tape, fr, obs.label, {}, m.cfg.logit_temperature));
    }
    diff::Tensor img_loss = diff::scale(
        tape, 0.5, diff::add(tape, sample_losses[0], sample_losses[1]));
    return obj::loss_total(tape, img_loss, text_loss);
  };

  diff::GradCheckReport report = diff::grad_check(fn, m.params, 1e-5);
  INFO("worst parameter: ", report.worst_param, "[", report.worst_index, "]");
  CHECK(report.entries_checked > 0);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("text loss gradients over two classes match finite differences") {
  world::WorldSpec ws;
  ws.n_subjects = 1;
  ws.n_contexts = 2;
  ws.grid_h = ws.grid_w = 8;
  ws.feat_dim = 3;
  ws.explicit_compat = {{1, 0}};
  ws.seed = 77;

  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.attn = 6;
  mc.seed = 606;
  model::Model m = model::build_model(mc, ws, 2);

  Rng noise(4127);
  for (const auto& name : m.params.names())
    for (double& v : m.params.values(name)) v += 0.4 * noise.normal();

  std::vector<std::vector<double>> vs(2, std::vector<double>(8, 0.0));
  for (auto& v : vs)
    for (double& x : v) x = noise.normal();

  diff::LossFn fn = [&](diff::Tape& tape, diff::ParamStore&) {
    std::vector<diff::Tensor> parts;
    for (int cls = 0; cls < 2; ++cls) {
      text::TextPair pair = model::class_pair(tape, m, cls, false);
      diff::Tensor v = diff::constant({1, 8}, vs[static_cast<size_t>(cls)]);
      parts.push_back(
          text::loss_text_total(tape, pair, v, m.cfg.text_weights, 1.0));
    }
    return diff::scale(tape, 0.5, diff::add(tape, parts[0], parts[1]));
  };

  diff::GradCheckReport report = diff::grad_check(fn, m.params, 1e-5);
  INFO("worst parameter: ", report.worst_param, "[", report.worst_index, "]");
  CHECK(report.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------------------
// Class prototypes

TEST_CASE("class prototypes average the normal support embeddings") {
  world::WorldSpec ws;
  ws.n_subjects = 1;
  ws.n_contexts = 2;
  ws.grid_h = ws.grid_w = 8;
  ws.feat_dim = 3;
  ws.explicit_compat = {{1, 0}};
  ws.seed = 17;
  world::World w = world::build_world(ws);

  world::Dataset ds;
  ds.world = w;
  ds.ss_pool = {{0, 1}};
  ds.cc_pool = {{0, 1}};
  for (uint64_t i = 0; i < 2; ++i)
    ds.samples.push_back(world::render(w, 0, 0, i));
  ds.samples.push_back(world::render(w, 0, 1, 7));
  REQUIRE(ds.samples[2].label == 1);

  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.attn = 6;
  mc.use_csr = false;  // bare encoder; the oracle below re-encodes directly
  model::Model m = model::build_model(mc, ws, 1);

  std::vector<std::vector<double>> protos =
      obj::class_prototypes(m, ds, {0, 1, 2});
  REQUIRE(protos.size() == 1);

  diff::Tape tape;
  diff::NoGradGuard ng(tape);
  std::vector<double> want(static_cast<size_t>(mc.width), 0.0);
  for (int i = 0; i < 2; ++i) {
    enc::VisualOut out = enc::encode_view(m.visual, tape, ds.samples[i].x);
    for (int k = 0; k < mc.width; ++k) want[k] += out.cls.values()[k];
  }
  for (int k = 0; k < mc.width; ++k) {
    want[k] /= 2.0;
    CHECK(protos[0][k] == doctest::Approx(want[k]).epsilon(1e-14));
  }

  // Anomalous-only support cannot anchor the text losses.
  CHECK_THROWS_AS(obj::class_prototypes(m, ds, {2}), obj::ObjectiveError);
}
