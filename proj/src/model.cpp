#include "ccl/model.hpp"

#include <cmath>

namespace ccl::model {

const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kCrm: return "crm";
    case Fusion::kAverage: return "average";
    case Fusion::kStaticWeights: return "static_weights";
    case Fusion::kConcatLinear: return "concat_linear";
  }
  throw ModelError("unknown fusion kind");
}

Fusion fusion_from_name(const std::string& name) {
  if (name == "crm") return Fusion::kCrm;
  if (name == "average") return Fusion::kAverage;
  if (name == "static_weights") return Fusion::kStaticWeights;
  if (name == "concat_linear") return Fusion::kConcatLinear;
  throw ModelError("unknown fusion kind '" + name + "'");
}

void ModelConfig::validate() const {
  if (width < 4) throw ModelError("embedding width too small");
  if (visual_layers < 1 || text_layers < 1)
    throw ModelError("encoders need at least one layer");
  if (patch < 1) throw ModelError("patch size must be positive");
  if (k_apply < 1 || tr_apply < 1)
    throw ModelError("adapter depths must be positive");
  if (attn < 1) throw ModelError("attention width must be positive");
  if (active.empty()) throw ModelError("no active branches");
  for (size_t i = 0; i < active.size(); ++i)
    for (size_t j = i + 1; j < active.size(); ++j)
      if (active[i] == active[j]) throw ModelError("duplicate active branch");
  if (!(logit_temperature > 0.0))
    throw ModelError("logit temperature must be positive");
  text_weights.validate();
}

Model build_model(const ModelConfig& cfg, const world::WorldSpec& ws, int n_classes) {
  cfg.validate();
  if (n_classes < 1) throw ModelError("need at least one class");
  if (ws.grid_h % cfg.patch != 0 || ws.grid_w % cfg.patch != 0)
    throw ModelError("patch size " + std::to_string(cfg.patch) +
                     " does not divide the " + std::to_string(ws.grid_h) + "x" +
                     std::to_string(ws.grid_w) + " grid");

  Model m;
  m.cfg = cfg;
  m.world_spec = ws;

  enc::VisualConfig vc;
  vc.grid_h = ws.grid_h;
  vc.grid_w = ws.grid_w;
  vc.feat_dim = ws.feat_dim;
  vc.patch = cfg.patch;
  vc.layers = cfg.visual_layers;
  vc.width = cfg.width;
  vc.seed = cfg.seed;
  m.visual = enc::make_visual_encoder(vc);

  enc::TextConfig tc;
  tc.layers = cfg.text_layers;
  tc.width = cfg.width;
  tc.seed = cfg.seed + 1;
  m.text_encoder = enc::make_text_encoder(tc);

  m.adapter_cfg.width = cfg.width;
  m.adapter_cfg.bank = cfg.visual_layers;
  m.adapter_cfg.k_apply = std::min(cfg.k_apply, cfg.visual_layers);
  m.adapter_cfg.seed = cfg.seed + 2;
  for (csr::Branch b :
       {csr::Branch::kSubject, csr::Branch::kContext, csr::Branch::kGlobal})
    csr::add_adapter_params(m.params, csr::branch_prefix(b), m.adapter_cfg);

  m.tr_cfg.width = cfg.width;
  m.tr_cfg.bank = cfg.text_layers;
  m.tr_cfg.k_apply = std::min(cfg.tr_apply, cfg.text_layers);
  m.tr_cfg.seed = cfg.seed + 3;
  csr::add_adapter_params(m.params, "tr", m.tr_cfg);

  m.crm_cfg.width = cfg.width;
  m.crm_cfg.attn = cfg.attn;
  m.crm_cfg.seed = cfg.seed + 4;
  m.crm_cfg.query_from_normal = cfg.query_from_normal;
  crm::add_crm_params(m.params, m.crm_cfg);

  // Fusion-baseline parameters exist only for the baseline in use.
  int n_active = static_cast<int>(cfg.active.size());
  if (cfg.fusion == Fusion::kStaticWeights) {
    m.params.add("fuse.static", {n_active}, std::vector<double>(n_active, 0.0));
  } else if (cfg.fusion == Fusion::kConcatLinear) {
    // Identity block on the first active branch: the initial fused embedding
    // reproduces that branch, a sane starting point for a learned mixer.
    std::vector<double> w(static_cast<size_t>(n_active) * cfg.width * cfg.width, 0.0);
    for (int i = 0; i < cfg.width; ++i)
      w[static_cast<size_t>(i) * cfg.width + i] = 1.0;
    m.params.add("fuse.concat", {n_active * cfg.width, cfg.width}, std::move(w));
  }

  m.prompts.reserve(n_classes);
  for (int cls = 0; cls < n_classes; ++cls)
    m.prompts.push_back(text::default_prompt_set("subject " + std::to_string(cls)));
  return m;
}

enc::LayerHook visual_hook(Model& m, csr::Branch b, bool frozen) {
  if (!m.cfg.use_csr) return {};
  return csr::make_hook(m.params, csr::branch_prefix(b), m.adapter_cfg,
                        m.visual.cfg.layers, frozen);
}

csr::BranchBundle refine(diff::Tape& tape, Model& m, const world::Observation& obs,
                         const csr::RefineOptions& opt) {
  if (m.cfg.use_csr)
    return csr::refine_branches(tape, m.visual, m.params, m.adapter_cfg,
                                m.world_spec, obs, opt);

  // Adapter-free path: same view selection, bare encoder.
  bool want_masks = opt.training || opt.use_masks;
  size_t cells = static_cast<size_t>(m.world_spec.grid_h) * m.world_spec.grid_w;
  if (want_masks && obs.mask.size() != cells)
    throw ModelError(opt.training ? "training mode needs a subject mask"
                                  : "use_masks set but the observation has no mask");
  const std::vector<double>* in_s = &obs.x;
  const std::vector<double>* in_c = &obs.x;
  enc::ViewTriple views;
  if (want_masks) {
    views = enc::make_views(m.world_spec, obs);
    in_s = &views.subject;
    in_c = &views.context;
  }
  csr::BranchBundle out;
  enc::VisualOut s = enc::encode_view(m.visual, tape, *in_s);
  enc::VisualOut c = enc::encode_view(m.visual, tape, *in_c);
  enc::VisualOut g = enc::encode_view(m.visual, tape, obs.x);
  out.cls_s = s.cls;
  out.cls_c = c.cls;
  out.cls_g = g.cls;
  out.patches_s = s.patches;
  out.patches_c = c.patches;
  out.patches_g = g.patches;
  return out;
}

text::TextPair class_pair(diff::Tape& tape, Model& m, int cls, bool frozen) {
  if (cls < 0 || cls >= m.n_classes())
    throw ModelError("class " + std::to_string(cls) + " out of range");
  enc::LayerHook hook;
  if (m.cfg.use_text_refine)
    hook = csr::make_hook(m.params, "tr", m.tr_cfg, m.text_encoder.cfg.layers,
                          frozen);
  return text::build_text_pair(tape, m.text_encoder, m.prompts[cls], hook);
}

std::vector<text::TextPair> frozen_class_pairs(Model& m) {
  std::vector<text::TextPair> out;
  out.reserve(m.prompts.size());
  diff::Tape tape;
  diff::NoGradGuard ng(tape);
  for (int cls = 0; cls < m.n_classes(); ++cls)
    out.push_back(class_pair(tape, m, cls, true));
  return out;
}

}  // namespace ccl::model
