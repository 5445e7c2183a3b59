#include "ccl/crm.hpp"

#include <cmath>

#include "ccl/rng.hpp"

namespace ccl::crm {

using diff::Tape;
using diff::Tensor;

void CrmConfig::validate() const {
  if (width < 1 || attn < 1)
    throw CrmError("attention dims must be positive");
}

void add_crm_params(diff::ParamStore& store, const CrmConfig& cfg) {
  cfg.validate();
  auto make = [&](uint64_t tag) {
    Rng rng(derive_seed(cfg.seed, {0xc2a, tag}));
    std::vector<double> w(static_cast<size_t>(cfg.width) * cfg.attn);
    for (auto& v : w) v = rng.normal() / std::sqrt(cfg.width);
    return w;
  };
  store.add("crm.wq", {cfg.width, cfg.attn}, make(1));
  store.add("crm.wk", {cfg.width, cfg.attn}, make(2));
}

bool has_crm_params(const diff::ParamStore& store) {
  return store.has("crm.wq") && store.has("crm.wk");
}

namespace {

void check_unit(const Tensor& t, const char* what) {
  double n2 = 0.0;
  for (double v : t.values()) n2 += v * v;
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-10)
    throw CrmError(std::string(what) + " must be unit-normalized before fusion");
}

}  // namespace

// [1 x 2] logit row [sim(z, t0), sim(z, t1)].
Tensor sim_logits(Tape& tape, const Tensor& z, const text::TextPair& pair) {
  Tensor s0 = diff::cosine_sim(tape, z, pair.t0);
  Tensor s1 = diff::cosine_sim(tape, z, pair.t1);
  return diff::transpose(tape, diff::concat_rows(tape, {s0, s1}));
}

FusionResult fuse(Tape& tape, diff::ParamStore& store, const CrmConfig& cfg,
                  const csr::BranchBundle& bundle, const text::TextPair& pair,
                  const std::vector<csr::Branch>& active, bool frozen) {
  cfg.validate();
  if (active.empty()) throw CrmError("active branch set is empty");
  if (!has_crm_params(store)) throw CrmError("crm parameters are missing");
  check_unit(pair.t0, "t0");
  check_unit(pair.t1, "t1");

  Tensor wq = frozen ? store.use_frozen("crm.wq") : store.use(tape, "crm.wq");
  Tensor wk = frozen ? store.use_frozen("crm.wk") : store.use(tape, "crm.wk");

  const Tensor& tq = cfg.query_from_normal ? pair.t0 : pair.t1;
  Tensor q = diff::matmul(tape, tq, wq);  // [1 x D_a]

  FusionResult out;
  out.active = active;
  std::vector<Tensor> zs, scores;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.attn));
  for (csr::Branch b : active) {
    Tensor z = diff::l2_normalize(tape, bundle.cls(b));
    Tensor key = diff::matmul(tape, z, wk);  // [1 x D_a]
    scores.push_back(diff::scale(tape, inv_sqrt,
                                 diff::sum(tape, diff::mul(tape, q, key))));
    zs.push_back(z);
  }
  Tensor score_row = diff::transpose(tape, diff::concat_rows(tape, scores));
  out.alpha = diff::softmax(tape, score_row);  // [1 x n]

  Tensor alpha_col = diff::transpose(tape, out.alpha);  // [n x 1]
  for (size_t i = 0; i < zs.size(); ++i) {
    Tensor a_i = diff::slice_rows(tape, alpha_col, static_cast<int>(i),
                                  static_cast<int>(i) + 1);
    Tensor term = diff::scale(tape, a_i, zs[i]);
    out.fused = i == 0 ? term : diff::add(tape, out.fused, term);
  }

  for (const Tensor& z : zs)
    out.branch_logits.push_back(sim_logits(tape, z, pair));
  out.fused_logits = sim_logits(tape, out.fused, pair);
  return out;
}

std::vector<double> fuse_patches(const FusionResult& fusion,
                                 const std::vector<std::vector<double>>& margins) {
  const auto& alpha = fusion.alpha.values();
  if (margins.size() != alpha.size())
    throw CrmError("got " + std::to_string(margins.size()) +
                   " margin rows for " + std::to_string(alpha.size()) +
                   " attention weights");
  if (margins.empty()) throw CrmError("no patch margins to fuse");
  size_t n = margins[0].size();
  for (const auto& row : margins)
    if (row.size() != n) throw CrmError("patch counts differ across branches");

  std::vector<double> fused(n, 0.0);
  for (size_t b = 0; b < margins.size(); ++b)
    for (size_t j = 0; j < n; ++j) fused[j] += alpha[b] * margins[b][j];
  return fused;
}

}  // namespace ccl::crm
