#include "ccl/objective.hpp"

#include <algorithm>
#include <cmath>

#include "ccl/rng.hpp"

namespace ccl::obj {

using diff::Tape;
using diff::Tensor;

void ImgLossWeights::validate() const {
  for (double w : {fuse_img, fuse_cons, fuse_ent})
    if (!std::isfinite(w) || w < 0.0)
      throw ObjectiveError("image loss weights must be finite and nonnegative");
}

namespace {

Tensor add_chain(Tape& tape, const std::vector<Tensor>& xs) {
  Tensor acc = xs.front();
  for (size_t i = 1; i < xs.size(); ++i) acc = diff::add(tape, acc, xs[i]);
  return acc;
}

}  // namespace

Tensor loss_branch_ce(Tape& tape, const Tensor& logits, int y, double temperature) {
  if (logits.size() != 2)
    throw ObjectiveError("expected a two-logit row, got shape " +
                         diff::shape_str(logits.shape));
  if (!(temperature > 0.0)) throw ObjectiveError("temperature must be positive");
  Tensor l = temperature == 1.0 ? logits
                                : diff::scale(tape, 1.0 / temperature, logits);
  return diff::cross_entropy_2class(tape, l, y);
}

ImgTerms loss_img_terms(Tape& tape, const crm::FusionResult& fusion, int y,
                        const ImgLossWeights& w, double temperature) {
  w.validate();
  if (fusion.branch_logits.empty())
    throw ObjectiveError("fusion result carries no branch logits");

  ImgTerms out;
  std::vector<Tensor> ces;
  ces.reserve(fusion.branch_logits.size());
  for (const Tensor& l : fusion.branch_logits)
    ces.push_back(loss_branch_ce(tape, l, y, temperature));
  Tensor ce_branches = add_chain(tape, ces);
  out.ce_branches = ce_branches.scalar();

  Tensor ce_fused = loss_branch_ce(tape, fusion.fused_logits, y, temperature);
  out.ce_fused = ce_fused.scalar();

  double inv_n = 1.0 / static_cast<double>(fusion.branch_logits.size());
  Tensor mean_logits =
      diff::scale(tape, inv_n, add_chain(tape, fusion.branch_logits));
  Tensor cons = diff::sq_l2_dist(tape, fusion.fused_logits, mean_logits);
  out.consistency = cons.scalar();

  Tensor ent = diff::entropy(tape, fusion.alpha);
  out.neg_entropy = -ent.scalar();

  Tensor total =
      diff::add(tape, ce_branches, diff::scale(tape, w.fuse_img, ce_fused));
  total = diff::add(tape, total, diff::scale(tape, w.fuse_cons, cons));
  total = diff::add(tape, total, diff::scale(tape, -w.fuse_ent, ent));
  out.total = total;
  return out;
}

Tensor loss_img_total(Tape& tape, const crm::FusionResult& fusion, int y,
                      const ImgLossWeights& w, double temperature) {
  return loss_img_terms(tape, fusion, y, w, temperature).total;
}

Tensor loss_total(Tape& tape, const Tensor& img, const Tensor& text) {
  if (img.size() != 1 || text.size() != 1)
    throw ObjectiveError("loss terms must be scalars");
  return diff::add(tape, img, text);
}

crm::FusionResult fuse_baseline(Tape& tape, diff::ParamStore& store,
                                model::Fusion kind, const csr::BranchBundle& bundle,
                                const text::TextPair& pair,
                                const std::vector<csr::Branch>& active,
                                bool frozen) {
  if (kind == model::Fusion::kCrm)
    throw ObjectiveError("crm is not a baseline; call crm::fuse");
  if (active.empty()) throw ObjectiveError("active branch set is empty");

  int n = static_cast<int>(active.size());
  crm::FusionResult out;
  out.active = active;
  std::vector<Tensor> zs;
  zs.reserve(active.size());
  for (csr::Branch b : active)
    zs.push_back(diff::l2_normalize(tape, bundle.cls(b)));

  switch (kind) {
    case model::Fusion::kAverage:
      out.alpha = diff::constant({1, n}, std::vector<double>(n, 1.0 / n));
      out.fused = diff::scale(tape, 1.0 / n, add_chain(tape, zs));
      break;

    case model::Fusion::kStaticWeights: {
      if (!store.has("fuse.static"))
        throw ObjectiveError(
            "fuse.static is missing; the model was not built for static fusion");
      Tensor wv = frozen ? store.use_frozen("fuse.static")
                         : store.use(tape, "fuse.static");
      if (wv.size() != n)
        throw ObjectiveError("fuse.static holds " + std::to_string(wv.size()) +
                             " weights for " + std::to_string(n) +
                             " active branches");
      // concat_rows of a single [n] vector is the cheap reshape to [1 x n].
      out.alpha = diff::concat_rows(tape, {diff::softmax(tape, wv)});
      Tensor alpha_col = diff::transpose(tape, out.alpha);
      for (int i = 0; i < n; ++i) {
        Tensor a_i = diff::slice_rows(tape, alpha_col, i, i + 1);
        Tensor term = diff::scale(tape, a_i, zs[i]);
        out.fused = i == 0 ? term : diff::add(tape, out.fused, term);
      }
      break;
    }

    case model::Fusion::kConcatLinear: {
      if (!store.has("fuse.concat"))
        throw ObjectiveError(
            "fuse.concat is missing; the model was not built for concat fusion");
      Tensor w = frozen ? store.use_frozen("fuse.concat")
                        : store.use(tape, "fuse.concat");
      std::vector<Tensor> cols;
      cols.reserve(zs.size());
      for (const Tensor& z : zs) cols.push_back(diff::transpose(tape, z));
      Tensor zcat = diff::transpose(tape, diff::concat_rows(tape, cols));
      out.fused = diff::matmul(tape, zcat, w);
      // No attention is computed here; the uniform placeholder keeps the
      // result shape usable and is reported as n/a upstream.
      out.alpha = diff::constant({1, n}, std::vector<double>(n, 1.0 / n));
      break;
    }

    default:
      throw ObjectiveError("unknown fusion kind");
  }

  for (const Tensor& z : zs)
    out.branch_logits.push_back(crm::sim_logits(tape, z, pair));
  out.fused_logits = crm::sim_logits(tape, out.fused, pair);
  return out;
}

crm::FusionResult fuse_any(Tape& tape, model::Model& m,
                           const csr::BranchBundle& bundle,
                           const text::TextPair& pair, bool frozen) {
  if (m.cfg.fusion == model::Fusion::kCrm)
    return crm::fuse(tape, m.params, m.crm_cfg, bundle, pair, m.cfg.active,
                     frozen);
  return fuse_baseline(tape, m.params, m.cfg.fusion, bundle, pair, m.cfg.active,
                       frozen);
}

// ---------------------------------------------------------------------------
// Training

void TrainPlan::validate() const {
  if (stage1.epochs < 0 || stage2.epochs < 0)
    throw ObjectiveError("epoch counts must be nonnegative");
  if (stage1.batch < 1 || stage2.batch < 1)
    throw ObjectiveError("batch sizes must be positive");
  if (shots < 1) throw ObjectiveError("shots must be positive");
  img_weights.validate();
  // The optimizer configs are validated inside train(), after the cosine
  // horizon is resolved against the dataset.
}

TrainPlan desk_plan() {
  TrainPlan p;
  p.stage1.epochs = 5;
  p.stage1.batch = 16;
  p.stage1.optim.lr = 2e-2;
  p.stage1.optim.schedule = diff::LrSchedule::kCosine;
  p.stage2.epochs = 20;
  p.stage2.batch = 8;
  p.stage2.optim.lr = 2.5e-2;
  p.stage2.optim.schedule = diff::LrSchedule::kCosine;
  return p;
}

TrainPlan table7_plan() {
  TrainPlan p = desk_plan();
  p.stage1.optim.lr = 2e-5;
  p.stage1.optim.schedule = diff::LrSchedule::kConstant;
  p.stage2.optim.lr = 3e-4;
  p.stage2.optim.schedule = diff::LrSchedule::kPiecewise;
  p.stage2.optim.milestones = {16000, 32000};
  p.stage2.optim.factor = 0.5;
  return p;
}

TrainPlan b1_plan() {
  TrainPlan p = desk_plan();
  p.stage1.optim.lr = 2e-5;
  p.stage2.optim.lr = 5e-5;
  return p;
}

namespace {

bool name_has_prefix(const std::string& name,
                     const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}

diff::GradMap keep_prefixes(diff::GradMap grads,
                            const std::vector<std::string>& prefixes) {
  diff::GradMap out;
  for (auto& [name, g] : grads)
    if (name_has_prefix(name, prefixes)) out[name] = std::move(g);
  return out;
}

// Refined global embedding of one observation, gradients off.
std::vector<double> frozen_global(model::Model& m, const world::Observation& obs) {
  Tape tape;
  diff::NoGradGuard ng(tape);
  csr::RefineOptions opt;
  opt.frozen = true;
  return model::refine(tape, m, obs, opt).cls_g.values();
}

std::map<std::string, double> gate_means(const model::Model& m) {
  std::map<std::string, double> out;
  auto record = [&](const std::string& prefix, const csr::AdapterConfig& cfg) {
    if (!csr::has_adapter_params(m.params, prefix, cfg)) return;
    std::vector<double> g = csr::gate_values(m.params, prefix, cfg);
    if (g.empty()) return;
    double s = 0.0;
    for (double v : g) s += v;
    out[prefix] = s / static_cast<double>(g.size());
  };
  if (m.cfg.use_csr)
    for (csr::Branch b : {csr::Branch::kSubject, csr::Branch::kContext,
                          csr::Branch::kGlobal})
      record(csr::branch_prefix(b), m.adapter_cfg);
  if (m.cfg.use_text_refine) record("tr", m.tr_cfg);
  return out;
}

struct StageCtx {
  model::Model& m;
  const world::Dataset& ds;
  const TrainPlan& plan;
  const std::vector<int>& support;
  Rng& shuffler;
  History& hist;
};

void run_stage(StageCtx& c, int stage_no) {
  const StagePlan& sp = stage_no == 1 ? c.plan.stage1 : c.plan.stage2;
  if (sp.epochs == 0) return;

  const model::ModelConfig& mc = c.m.cfg;
  bool text_losses = stage_no == 1 || (c.plan.joint_text && mc.use_text_refine);
  bool img_losses = stage_no == 2;
  std::vector<std::string> prefixes;
  if (stage_no == 1) {
    if (!mc.use_text_refine) return;  // nothing trainable touches the text path
    prefixes = {"tr."};
  } else {
    // With no adapters and a parameter-free fusion the image graph has no
    // trainable leaves; skip rather than record empty steps.
    bool has_work = mc.use_csr || mc.fusion != model::Fusion::kAverage ||
                    (c.plan.joint_text && mc.use_text_refine);
    if (!has_work) return;
    prefixes = {"csr.", "crm.", "fuse."};
    if (c.plan.joint_text) prefixes.push_back("tr.");
  }

  int n_support = static_cast<int>(c.support.size());
  int steps_per_epoch = (n_support + sp.batch - 1) / sp.batch;
  int64_t total_stage_steps = static_cast<int64_t>(sp.epochs) * steps_per_epoch;

  diff::OptimConfig optim = sp.optim;
  if (optim.schedule == diff::LrSchedule::kCosine && optim.total_steps == 0)
    optim.total_steps = total_stage_steps;
  try {
    optim.validate();
  } catch (const std::invalid_argument& e) {
    throw ObjectiveError(std::string("stage ") + std::to_string(stage_no) +
                         " optimizer: " + e.what());
  }

  // Each stage is its own optimization: fresh schedule position and Adam
  // bias-correction horizon. Moment buffers of parameters a stage never
  // updates are left untouched.
  c.m.params.set_step(0);

  // Text parameters are frozen across stage 2, so the class pairs can be
  // evaluated once and reused on every step's tape.
  std::vector<text::TextPair> frozen_pairs;
  if (img_losses && !text_losses) frozen_pairs = model::frozen_class_pairs(c.m);

  int n_classes = c.m.n_classes();
  const text::TextLossWeights& tw = mc.text_weights;
  int64_t stage_step = 0;

  // Any numeric failure inside a step, forward or backward, is a
  // divergence; re-raise with the position so long runs are debuggable.
  try {
    for (int epoch = 0; epoch < sp.epochs; ++epoch) {
      std::vector<std::vector<double>> protos;
      if (text_losses) protos = class_prototypes(c.m, c.ds, c.support);

      std::vector<int> order = c.support;
      c.shuffler.shuffle(order);

      std::map<std::string, double> term_sums;
      double loss_sum = 0.0, last_lr = 0.0;
      double alpha_sum = 0.0, alpha_sq = 0.0;
      int64_t alpha_n = 0;
      int steps_this_epoch = 0;

      for (int start = 0; start < n_support; start += sp.batch) {
        int end = std::min(n_support, start + sp.batch);
        Tape tape;
        std::vector<Tensor> parts;
        std::vector<text::TextPair> live;

        if (text_losses) {
          // Ortho warmup runs over stage 1; a joint stage 2 continues at full
          // weight.
          double progress =
              stage_no == 1 ? static_cast<double>(stage_step) /
                                  static_cast<double>(std::max<int64_t>(1, total_stage_steps))
                            : 1.0;
          double w_ortho = text::effective_ortho_weight(tw, progress);

          std::vector<Tensor> cls_losses;
          cls_losses.reserve(n_classes);
          live.reserve(n_classes);
          double ortho_sum = 0.0, cons_sum = 0.0, ground_sum = 0.0;
          for (int cls = 0; cls < n_classes; ++cls) {
            text::TextPair pair = model::class_pair(tape, c.m, cls, false);
            Tensor v = diff::constant({1, static_cast<int>(protos[cls].size())},
                                      protos[cls]);
            Tensor ortho = text::loss_ortho(tape, pair);
            Tensor cons = text::loss_cons(tape, pair);
            Tensor ground = text::loss_ground(tape, pair, v);
            ortho_sum += ortho.scalar();
            cons_sum += cons.scalar();
            ground_sum += ground.scalar();
            Tensor weighted = diff::add(
                tape, diff::scale(tape, w_ortho, ortho),
                diff::add(tape, diff::scale(tape, tw.cons, cons),
                          diff::scale(tape, tw.ground, ground)));
            cls_losses.push_back(weighted);
            live.push_back(std::move(pair));
          }
          Tensor text_total =
              diff::scale(tape, 1.0 / n_classes, add_chain(tape, cls_losses));

          // The calibration hinge is per-image on the batch's anomalous
          // samples; the image embedding enters as a constant so the gradient
          // pulls the text pair, not the visual path.
          if (tw.calib > 0.0) {
            std::vector<Tensor> hinges;
            for (int i = start; i < end; ++i) {
              const world::Observation& obs = c.ds.samples[order[i]];
              if (obs.label != 1) continue;
              std::vector<double> v = frozen_global(c.m, obs);
              Tensor vt = diff::constant({1, static_cast<int>(v.size())}, v);
              hinges.push_back(
                  text::loss_calib(tape, live[obs.subject], vt, tw.margin));
            }
            if (!hinges.empty()) {
              Tensor calib = diff::scale(tape, 1.0 / hinges.size(),
                                         add_chain(tape, hinges));
              term_sums["text.calib"] += calib.scalar();
              text_total =
                  diff::add(tape, text_total, diff::scale(tape, tw.calib, calib));
            }
          }

          term_sums["text.ortho"] += ortho_sum / n_classes;
          term_sums["text.cons"] += cons_sum / n_classes;
          term_sums["text.ground"] += ground_sum / n_classes;
          term_sums["text.ortho_weight"] += w_ortho;
          term_sums["text.total"] += text_total.scalar();
          parts.push_back(text_total);
        }

        if (img_losses) {
          std::vector<Tensor> sample_losses;
          double b_ce_br = 0.0, b_ce_fused = 0.0, b_cons = 0.0, b_negent = 0.0;
          for (int i = start; i < end; ++i) {
            const world::Observation& obs = c.ds.samples[order[i]];
            csr::RefineOptions ropt;
            ropt.training = true;
            csr::BranchBundle bundle = model::refine(tape, c.m, obs, ropt);
            const text::TextPair& pair =
                text_losses ? live[obs.subject] : frozen_pairs[obs.subject];
            crm::FusionResult fusion = fuse_any(tape, c.m, bundle, pair, false);
            ImgTerms terms = loss_img_terms(tape, fusion, obs.label,
                                            c.plan.img_weights,
                                            mc.logit_temperature);
            sample_losses.push_back(terms.total);
            b_ce_br += terms.ce_branches;
            b_ce_fused += terms.ce_fused;
            b_cons += terms.consistency;
            b_negent += terms.neg_entropy;
            for (double a : fusion.alpha.values()) {
              alpha_sum += a;
              alpha_sq += a * a;
              ++alpha_n;
            }
          }
          int bs = end - start;
          Tensor img_total =
              diff::scale(tape, 1.0 / bs, add_chain(tape, sample_losses));
          term_sums["img.ce_branches"] += b_ce_br / bs;
          term_sums["img.ce_fused"] += b_ce_fused / bs;
          term_sums["img.consistency"] += b_cons / bs;
          term_sums["img.neg_entropy"] += b_negent / bs;
          term_sums["img.total"] += img_total.scalar();
          parts.push_back(img_total);
        }

        Tensor loss =
            parts.size() == 1 ? parts[0] : loss_total(tape, parts[1], parts[0]);
        double loss_val = loss.scalar();
        if (!std::isfinite(loss_val))
          throw diff::NumericError("training diverged: non-finite loss");
        last_lr = diff::scheduled_lr(optim, c.m.params.step());
        tape.backward(loss);
        diff::GradMap grads =
            keep_prefixes(c.m.params.collect_grads(tape), prefixes);
        diff::optimizer_step(c.m.params, grads, optim);
        loss_sum += loss_val;
        ++stage_step;
        ++steps_this_epoch;
      }

      EpochStats st;
      st.stage = stage_no;
      st.epoch = epoch;
      st.steps_done = c.m.params.step();
      st.lr = last_lr;
      st.loss = loss_sum / steps_this_epoch;
      for (const auto& [k, v] : term_sums) st.terms[k] = v / steps_this_epoch;
      if (alpha_n > 0) {
        double mean = alpha_sum / static_cast<double>(alpha_n);
        st.alpha_mean = mean;
        st.alpha_std = std::sqrt(
            std::max(0.0, alpha_sq / static_cast<double>(alpha_n) - mean * mean));
      }
      st.gates = gate_means(c.m);
      c.hist.push_back(st);
    }
  } catch (const diff::NumericError& e) {
    throw diff::NumericError(std::string(e.what()) + " (stage " +
                             std::to_string(stage_no) + " step " +
                             std::to_string(stage_step) + ")");
  }
}

}  // namespace

std::vector<std::vector<double>> class_prototypes(model::Model& m,
                                                  const world::Dataset& ds,
                                                  const std::vector<int>& support) {
  int n_classes = m.n_classes();
  std::vector<std::vector<double>> out(n_classes);
  std::vector<int> counts(n_classes, 0);
  for (int idx : support) {
    const world::Observation& obs = ds.samples.at(static_cast<size_t>(idx));
    if (obs.label != 0) continue;
    if (obs.subject < 0 || obs.subject >= n_classes)
      throw ObjectiveError("support sample's subject is out of range");
    std::vector<double> v = frozen_global(m, obs);
    if (out[obs.subject].empty()) out[obs.subject].assign(v.size(), 0.0);
    for (size_t i = 0; i < v.size(); ++i) out[obs.subject][i] += v[i];
    ++counts[obs.subject];
  }
  for (int c = 0; c < n_classes; ++c) {
    if (counts[c] == 0)
      throw ObjectiveError("class " + std::to_string(c) +
                           " has no normal support images to anchor the text "
                           "losses");
    for (double& x : out[c]) x /= counts[c];
  }
  return out;
}

History train(model::Model& m, const world::Dataset& ds, const TrainPlan& plan) {
  plan.validate();
  std::vector<int> support =
      world::sample_fewshot(ds, plan.shots, plan.support, plan.seed);
  Rng shuffler(derive_seed(plan.seed, {0x0b5e55edull}));
  History hist;
  StageCtx ctx{m, ds, plan, support, shuffler, hist};
  run_stage(ctx, 1);
  run_stage(ctx, 2);
  return hist;
}

}  // namespace ccl::obj
