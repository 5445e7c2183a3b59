#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "ccl/diff.hpp"
#include "ccl/model.hpp"
#include "ccl/objective.hpp"
#include "ccl/worldgen.hpp"

using namespace ccl;

namespace {

// Two subjects with disjoint compatible-context sets; small grid so a full
// run stays in the millisecond range.
world::Dataset tiny_dataset(uint64_t world_seed = 501, uint64_t split_seed = 9) {
  world::WorldSpec ws;
  ws.n_subjects = 2;
  ws.n_contexts = 6;
  ws.grid_h = ws.grid_w = 8;
  ws.feat_dim = 3;
  ws.explicit_compat = {{1, 1, 1, 0, 0, 0}, {0, 0, 0, 1, 1, 1}};
  ws.seed = world_seed;
  world::SplitPlan plan;
  plan.train = 24;
  plan.val = 8;
  plan.cross_context = 8;
  plan.seed = split_seed;
  return world::make_splits(world::build_world(ws), plan);
}

model::Model tiny_model(const world::Dataset& ds, uint64_t seed = 7001) {
  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.attn = 6;
  mc.seed = seed;
  return model::build_model(mc, ds.world.spec, ds.n_classes());
}

// Plan small enough to run in every test; cosine horizons auto-filled.
obj::TrainPlan tiny_plan(int e1, int e2) {
  obj::TrainPlan p;
  p.stage1.epochs = e1;
  p.stage1.batch = 8;
  p.stage1.optim.lr = 2e-2;
  p.stage1.optim.schedule = diff::LrSchedule::kCosine;
  p.stage2.epochs = e2;
  p.stage2.batch = 4;
  p.stage2.optim.lr = 2.5e-2;
  p.stage2.optim.schedule = diff::LrSchedule::kCosine;
  p.shots = 2;
  p.seed = 11;
  return p;
}

std::map<std::string, std::vector<double>> snapshot(const diff::ParamStore& ps,
                                                    const std::string& prefix) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& name : ps.names())
    if (name.rfind(prefix, 0) == 0) out[name] = ps.values(name);
  return out;
}

}  // namespace

TEST_CASE("stage two leaves the prompt refinement parameters untouched") {
  world::Dataset ds = tiny_dataset();

  model::Model m1 = tiny_model(ds);
  obj::History h1 = obj::train(m1, ds, tiny_plan(2, 0));
  auto tr_after_stage1 = snapshot(m1.params, "tr.");

  model::Model m2 = tiny_model(ds);
  obj::History h2 = obj::train(m2, ds, tiny_plan(2, 5));

  // Text parameters end stage 1 in lockstep with the stage-1-only run and
  // never move again.
  CHECK(snapshot(m2.params, "tr.") == tr_after_stage1);

  // The visual adapters and the fusion projections did move.
  CHECK(snapshot(m2.params, "csr.s") != snapshot(m1.params, "csr.s"));
  CHECK(snapshot(m2.params, "crm.") != snapshot(m1.params, "crm."));

  // Stage-1 bookkeeping is identical across the two runs.
  REQUIRE(h1.size() == 2);
  REQUIRE(h2.size() == 7);
  for (size_t e = 0; e < h1.size(); ++e) {
    CHECK(h2[e].stage == 1);
    CHECK(h2[e].loss == h1[e].loss);
    CHECK(h2[e].gates == h1[e].gates);
  }
}

TEST_CASE("identical seeds give bit-identical parameters and history") {
  world::Dataset ds = tiny_dataset();
  model::Model a = tiny_model(ds);
  model::Model b = tiny_model(ds);
  REQUIRE(a.params.content_hash() == b.params.content_hash());

  obj::History ha = obj::train(a, ds, tiny_plan(2, 3));
  obj::History hb = obj::train(b, ds, tiny_plan(2, 3));

  CHECK(a.params.content_hash() == b.params.content_hash());
  REQUIRE(ha.size() == hb.size());
  for (size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].loss == hb[i].loss);
    CHECK(ha[i].lr == hb[i].lr);
    CHECK(ha[i].terms == hb[i].terms);
  }
}

TEST_CASE("training lowers both stage objectives on the support set") {
  world::Dataset ds = tiny_dataset();

  // Hold the ortho weight constant so the stage-1 objective is comparable
  // across epochs.
  model::Model m = tiny_model(ds);
  m.cfg.text_weights.anneal_fraction = 0.0;
  obj::TrainPlan p = tiny_plan(6, 15);
  p.stage1.batch = 4;
  p.stage2.optim.lr = 5e-2;
  obj::History h = obj::train(m, ds, p);

  double s1_first = -1.0, s1_last = -1.0, s2_first = -1.0, s2_last = -1.0;
  double ce_first = -1.0, ce_last = -1.0;
  for (const auto& st : h) {
    if (st.stage == 1) {
      if (st.epoch == 0) s1_first = st.terms.at("text.total");
      s1_last = st.terms.at("text.total");
    } else {
      if (st.epoch == 0) {
        s2_first = st.terms.at("img.total");
        ce_first = st.terms.at("img.ce_fused");
      }
      s2_last = st.terms.at("img.total");
      ce_last = st.terms.at("img.ce_fused");
    }
  }
  CHECK(s1_last < s1_first - 2e-3);
  CHECK(s2_last < s2_first - 2e-2);
  CHECK(ce_last < ce_first - 1e-2);
}

TEST_CASE("zero-epoch plans and workless stages are no-ops") {
  world::Dataset ds = tiny_dataset();

  model::Model m = tiny_model(ds);
  uint64_t before = m.params.content_hash();
  obj::History h = obj::train(m, ds, tiny_plan(0, 0));
  CHECK(h.empty());
  CHECK(m.params.content_hash() == before);

  // No adapters, parameter-free fusion, no prompt refinement: both stages
  // skip rather than record empty steps.
  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.seed = 7002;
  mc.use_csr = false;
  mc.use_text_refine = false;
  mc.fusion = model::Fusion::kAverage;
  model::Model bare = model::build_model(mc, ds.world.spec, ds.n_classes());
  uint64_t bare_before = bare.params.content_hash();
  obj::History hb = obj::train(bare, ds, tiny_plan(2, 3));
  CHECK(hb.empty());
  CHECK(bare.params.content_hash() == bare_before);
}

TEST_CASE("numeric failures abort with the stage and step position") {
  world::Dataset ds = tiny_dataset();
  constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

  model::Model m = tiny_model(ds);
  m.params.values("tr.l0.w1")[0] = kNan;
  try {
    obj::train(m, ds, tiny_plan(1, 0));
    FAIL("expected a NumericError");
  } catch (const diff::NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("tr.l0.w1") != std::string::npos);
    CHECK(msg.find("stage 1 step 0") != std::string::npos);
  }

  // A poisoned adapter trips while the class prototypes are refined, before
  // the first text loss; the abort still names the position.
  model::Model m2 = tiny_model(ds);
  m2.params.values("csr.s.l0.w1")[0] = kNan;
  try {
    obj::train(m2, ds, tiny_plan(1, 0));
    FAIL("expected a NumericError");
  } catch (const diff::NumericError& e) {
    CHECK(std::string(e.what()).find("stage 1 step 0") != std::string::npos);
  }
}

TEST_CASE("the frozen encoders never move") {
  world::Dataset ds = tiny_dataset();
  model::Model m = tiny_model(ds);
  uint64_t vh = m.visual.weight_hash();
  uint64_t th = m.text_encoder.weight_hash();
  obj::train(m, ds, tiny_plan(2, 3));
  CHECK(m.visual.weight_hash() == vh);
  CHECK(m.text_encoder.weight_hash() == th);
}

TEST_CASE("calibration hinge follows the support composition") {
  world::Dataset ds = tiny_dataset();

  model::Model m = tiny_model(ds);
  m.cfg.text_weights.calib = 0.05;
  obj::History balanced = obj::train(m, ds, tiny_plan(2, 0));
  REQUIRE(!balanced.empty());
  for (const auto& st : balanced) {
    REQUIRE(st.terms.count("text.calib") == 1);
    CHECK(st.terms.at("text.calib") > 0.0);
  }

  // Normal-only support has no anomalous images, so no hinge is ever formed.
  model::Model m2 = tiny_model(ds);
  m2.cfg.text_weights.calib = 0.05;
  obj::TrainPlan p = tiny_plan(2, 3);
  p.support = world::SupportMode::kNormalOnly;
  obj::History normals = obj::train(m2, ds, p);
  REQUIRE(!normals.empty());
  for (const auto& st : normals) CHECK(st.terms.count("text.calib") == 0);
}

TEST_CASE("joint text training keeps the prompts moving in stage two") {
  world::Dataset ds = tiny_dataset();

  model::Model base = tiny_model(ds);
  obj::train(base, ds, tiny_plan(2, 0));
  auto tr_stage1 = snapshot(base.params, "tr.");

  model::Model joint = tiny_model(ds);
  obj::TrainPlan p = tiny_plan(2, 3);
  p.joint_text = true;
  obj::History h = obj::train(joint, ds, p);
  CHECK(snapshot(joint.params, "tr.") != tr_stage1);

  // Joint stage-2 epochs carry both loss families.
  bool saw_joint_epoch = false;
  for (const auto& st : h)
    if (st.stage == 2) {
      CHECK(st.terms.count("text.total") == 1);
      CHECK(st.terms.count("img.total") == 1);
      saw_joint_epoch = true;
    }
  CHECK(saw_joint_epoch);
}

TEST_CASE("static fusion weights train in stage two") {
  world::Dataset ds = tiny_dataset();
  model::ModelConfig mc;
  mc.width = 8;
  mc.visual_layers = 2;
  mc.text_layers = 2;
  mc.patch = 4;
  mc.k_apply = 2;
  mc.tr_apply = 2;
  mc.seed = 7003;
  mc.fusion = model::Fusion::kStaticWeights;
  model::Model m = model::build_model(mc, ds.world.spec, ds.n_classes());

  const auto& w0 = m.params.values("fuse.static");
  CHECK(w0 == std::vector<double>(w0.size(), 0.0));
  obj::train(m, ds, tiny_plan(1, 3));
  const auto& w1 = m.params.values("fuse.static");
  bool moved = false;
  for (double v : w1) moved = moved || v != 0.0;
  CHECK(moved);
}

TEST_CASE("history records per-stage bookkeeping") {
  world::Dataset ds = tiny_dataset();
  model::Model m = tiny_model(ds);
  obj::TrainPlan p = tiny_plan(2, 3);
  p.stage1.batch = 3;  // 8 support images -> 3 steps with a short tail batch
  obj::History h = obj::train(m, ds, p);
  REQUIRE(h.size() == 5);

  CHECK(h[0].stage == 1);
  CHECK(h[0].epoch == 0);
  CHECK(h[0].steps_done == 3);
  CHECK(h[1].steps_done == 6);
  for (const char* key :
       {"text.ortho", "text.cons", "text.ground", "text.ortho_weight",
        "text.total"})
    CHECK(h[0].terms.count(key) == 1);

  double prev_lr = std::numeric_limits<double>::infinity();
  for (size_t i = 2; i < h.size(); ++i) {
    const auto& st = h[i];
    CHECK(st.stage == 2);
    CHECK(st.epoch == static_cast<int>(i) - 2);
    CHECK(st.steps_done == 2 * (st.epoch + 1));
    CHECK(st.lr > 0.0);
    CHECK(st.lr < prev_lr);  // cosine decays within the stage
    prev_lr = st.lr;

    for (const char* key : {"img.ce_branches", "img.ce_fused",
                            "img.consistency", "img.neg_entropy", "img.total"})
      CHECK(st.terms.count(key) == 1);

    // Attention rows sum to one, so the mean weight is pinned at 1/n.
    CHECK(st.alpha_mean == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    CHECK(st.alpha_std > 0.0);

    for (const char* bank : {"csr.s", "csr.c", "csr.g", "tr"}) {
      REQUIRE(st.gates.count(bank) == 1);
      CHECK(st.gates.at(bank) > 0.0);
      CHECK(st.gates.at(bank) < 1.0);
    }
  }
}

TEST_CASE("plan validation rejects broken settings") {
  world::Dataset ds = tiny_dataset();
  model::Model m = tiny_model(ds);

  obj::TrainPlan bad = tiny_plan(1, 0);
  bad.stage1.batch = 0;
  CHECK_THROWS_AS(obj::train(m, ds, bad), obj::ObjectiveError);

  bad = tiny_plan(1, 0);
  bad.shots = 0;
  CHECK_THROWS_AS(obj::train(m, ds, bad), obj::ObjectiveError);

  bad = tiny_plan(1, 0);
  bad.img_weights.fuse_cons = -0.1;
  CHECK_THROWS_AS(obj::train(m, ds, bad), obj::ObjectiveError);

  // Optimizer misconfiguration is reported with the owning stage.
  bad = tiny_plan(1, 0);
  bad.stage1.optim.lr = 0.0;
  try {
    obj::train(m, ds, bad);
    FAIL("expected an ObjectiveError");
  } catch (const obj::ObjectiveError& e) {
    CHECK(std::string(e.what()).find("stage 1 optimizer") != std::string::npos);
  }
}

TEST_CASE("presets carry the published schedules") {
  obj::TrainPlan desk = obj::desk_plan();
  CHECK(desk.stage1.epochs == 5);
  CHECK(desk.stage1.batch == 16);
  CHECK(desk.stage1.optim.lr == 2e-2);
  CHECK(desk.stage1.optim.schedule == diff::LrSchedule::kCosine);
  CHECK(desk.stage2.epochs == 20);
  CHECK(desk.stage2.batch == 8);
  CHECK(desk.stage2.optim.lr == 2.5e-2);
  CHECK(desk.stage2.optim.schedule == diff::LrSchedule::kCosine);
  CHECK(desk.stage1.optim.beta1 == 0.5);
  CHECK(desk.stage1.optim.beta2 == 0.999);
  CHECK(desk.shots == 4);
  CHECK(desk.support == world::SupportMode::kBalanced);
  CHECK(!desk.joint_text);
  CHECK(desk.img_weights.fuse_img == 1.0);
  CHECK(desk.img_weights.fuse_cons == 0.5);
  CHECK(desk.img_weights.fuse_ent == 0.05);

  obj::TrainPlan t7 = obj::table7_plan();
  CHECK(t7.stage1.optim.lr == 2e-5);
  CHECK(t7.stage1.optim.schedule == diff::LrSchedule::kConstant);
  CHECK(t7.stage2.optim.lr == 3e-4);
  CHECK(t7.stage2.optim.schedule == diff::LrSchedule::kPiecewise);
  CHECK(t7.stage2.optim.milestones == std::vector<int64_t>{16000, 32000});
  CHECK(t7.stage2.optim.factor == 0.5);
  CHECK(t7.stage1.epochs == 5);
  CHECK(t7.stage2.epochs == 20);

  obj::TrainPlan b1 = obj::b1_plan();
  CHECK(b1.stage1.optim.lr == 2e-5);
  CHECK(b1.stage2.optim.lr == 5e-5);
  CHECK(b1.stage1.optim.schedule == diff::LrSchedule::kCosine);
  CHECK(b1.stage2.optim.schedule == diff::LrSchedule::kCosine);
}
