#include "ccl/csr.hpp"

#include <cmath>

#include "ccl/rng.hpp"

namespace ccl::csr {

using diff::Tape;
using diff::Tensor;

void AdapterConfig::validate() const {
  if (width < 1) throw CsrError("adapter width must be positive");
  if (bank < 1) throw CsrError("adapter needs at least one bank layer");
  if (k_apply < 1 || k_apply > bank)
    throw CsrError("k_apply must lie in [1, bank]");
}

std::string param_name(const std::string& prefix, int layer, const char* field) {
  return prefix + ".l" + std::to_string(layer) + "." + field;
}

void add_adapter_params(diff::ParamStore& store, const std::string& prefix,
                        const AdapterConfig& cfg) {
  cfg.validate();
  int d = cfg.width;
  uint64_t pseed = derive_seed(cfg.seed, {fnv1a(prefix.data(), prefix.size())});
  for (int i = 0; i < cfg.bank; ++i) {
    Rng rng(derive_seed(pseed, {0xada97, static_cast<uint64_t>(i)}));
    std::vector<double> w1(static_cast<size_t>(d) * d);
    for (auto& v : w1) v = rng.normal() / std::sqrt(d);
    store.add(param_name(prefix, i, "w1"), {d, d}, std::move(w1));
    store.add(param_name(prefix, i, "b1"), {d}, std::vector<double>(d, 0.0));
    store.add(param_name(prefix, i, "w2"), {d, d},
              std::vector<double>(static_cast<size_t>(d) * d, 0.0));
    store.add(param_name(prefix, i, "b2"), {d}, std::vector<double>(d, 0.0));
    store.add(param_name(prefix, i, "gate"), {1}, {-2.0});
  }
}

bool has_adapter_params(const diff::ParamStore& store, const std::string& prefix,
                        const AdapterConfig& cfg) {
  for (int i = 0; i < cfg.bank; ++i)
    for (const char* f : {"w1", "b1", "w2", "b2", "gate"})
      if (!store.has(param_name(prefix, i, f))) return false;
  return true;
}

std::vector<double> gate_values(const diff::ParamStore& store,
                                const std::string& prefix, const AdapterConfig& cfg) {
  std::vector<double> out;
  out.reserve(cfg.bank);
  for (int i = 0; i < cfg.bank; ++i) {
    double rho = store.values(param_name(prefix, i, "gate")).at(0);
    out.push_back(1.0 / (1.0 + std::exp(-rho)));
  }
  return out;
}

Tensor csr_layer_update(Tape& tape, diff::ParamStore& store,
                        const std::string& prefix, const AdapterConfig& cfg,
                        const Tensor& x, int layer, bool frozen) {
  if (layer < 0 || layer >= cfg.k_apply)
    throw CsrError("layer " + std::to_string(layer) + " is not adapted (k_apply=" +
                   std::to_string(cfg.k_apply) + ")");
  if (x.cols() != cfg.width)
    throw CsrError("token width " + std::to_string(x.cols()) +
                   " does not match adapter width " + std::to_string(cfg.width));

  auto p = [&](const char* f) {
    return frozen ? store.use_frozen(param_name(prefix, layer, f))
                  : store.use(tape, param_name(prefix, layer, f));
  };
  Tensor hidden = diff::tanh_op(tape, diff::add_row(tape, diff::matmul(tape, x, p("w1")),
                                                    p("b1")));
  Tensor mlp = diff::add_row(tape, diff::matmul(tape, hidden, p("w2")), p("b2"));
  Tensor lam = diff::sigmoid(tape, p("gate"));
  Tensor keep = diff::sub(tape, diff::constant_scalar(1.0), lam);
  return diff::add(tape, diff::scale(tape, keep, x), diff::scale(tape, lam, mlp));
}

enc::LayerHook make_hook(diff::ParamStore& store, const std::string& prefix,
                         const AdapterConfig& cfg, int encoder_layers, bool frozen) {
  cfg.validate();
  if (cfg.k_apply > encoder_layers)
    throw CsrError("adapter wants " + std::to_string(cfg.k_apply) +
                   " layers but the encoder has " + std::to_string(encoder_layers));
  if (!has_adapter_params(store, prefix, cfg))
    throw CsrError("adapter parameters for '" + prefix + "' are missing");
  return [&store, prefix, cfg, frozen](Tape& tape, const Tensor& x, int layer) {
    if (layer >= cfg.k_apply) return x;
    return csr_layer_update(tape, store, prefix, cfg, x, layer, frozen);
  };
}

// ---------------------------------------------------------------------------
// Branch refinement

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::kSubject: return "subject";
    case Branch::kContext: return "context";
    case Branch::kGlobal: return "global";
  }
  throw CsrError("unknown branch");
}

const char* branch_prefix(Branch b) {
  switch (b) {
    case Branch::kSubject: return "csr.s";
    case Branch::kContext: return "csr.c";
    case Branch::kGlobal: return "csr.g";
  }
  throw CsrError("unknown branch");
}

const diff::Tensor& BranchBundle::cls(Branch b) const {
  switch (b) {
    case Branch::kSubject: return cls_s;
    case Branch::kContext: return cls_c;
    case Branch::kGlobal: return cls_g;
  }
  throw CsrError("unknown branch");
}

const diff::Tensor& BranchBundle::patches(Branch b) const {
  switch (b) {
    case Branch::kSubject: return patches_s;
    case Branch::kContext: return patches_c;
    case Branch::kGlobal: return patches_g;
  }
  throw CsrError("unknown branch");
}

BranchBundle refine_branches(Tape& tape, const enc::VisualEncoder& enc,
                             diff::ParamStore& store, const AdapterConfig& cfg,
                             const world::WorldSpec& spec,
                             const world::Observation& obs,
                             const RefineOptions& opt) {
  for (Branch b : {Branch::kSubject, Branch::kContext, Branch::kGlobal})
    if (!has_adapter_params(store, branch_prefix(b), cfg))
      throw CsrError(std::string("adapter parameters for branch '") +
                     branch_name(b) + "' are missing");

  bool want_masks = opt.training || opt.use_masks;
  size_t cells = static_cast<size_t>(spec.grid_h) * spec.grid_w;
  if (want_masks && obs.mask.size() != cells)
    throw CsrError(opt.training ? "training mode needs a subject mask"
                                : "use_masks set but the observation has no mask");

  const std::vector<double>* in_s = &obs.x;
  const std::vector<double>* in_c = &obs.x;
  enc::ViewTriple views;
  if (want_masks) {
    views = enc::make_views(spec, obs);
    in_s = &views.subject;
    in_c = &views.context;
  }

  auto run = [&](Branch b, const std::vector<double>& view) {
    auto hook = make_hook(store, branch_prefix(b), cfg, enc.cfg.layers, opt.frozen);
    return enc::encode_view(enc, tape, view, hook);
  };
  enc::VisualOut s = run(Branch::kSubject, *in_s);
  enc::VisualOut c = run(Branch::kContext, *in_c);
  enc::VisualOut g = run(Branch::kGlobal, obs.x);

  BranchBundle out;
  out.cls_s = s.cls;
  out.cls_c = c.cls;
  out.cls_g = g.cls;
  out.patches_s = s.patches;
  out.patches_c = c.patches;
  out.patches_g = g.patches;
  return out;
}

}  // namespace ccl::csr
