#pragma once

// Compatibility Reasoning Module: single-head attention from the anomaly text
// embedding over the branch embeddings. The query is a projection of t1, the
// keys are projections of the (unit-normalized) branch cls embeddings, and
// the attention weights alpha mix the branches into one fused embedding that
// the 2-logit compatibility heads read out.

#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/csr.hpp"
#include "ccl/diff.hpp"
#include "ccl/textref.hpp"

namespace ccl::crm {

struct CrmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CrmConfig {
  int width = 32;  // embedding dim D
  int attn = 32;   // attention dim D_a
  uint64_t seed = 59;
  bool query_from_normal = false;  // ablation: build q from t0 instead of t1

  void validate() const;
};

// Registers "crm.wq" and "crm.wk", both [D x D_a], small random init.
void add_crm_params(diff::ParamStore& store, const CrmConfig& cfg);
bool has_crm_params(const diff::ParamStore& store);

struct FusionResult {
  std::vector<csr::Branch> active;
  diff::Tensor alpha;                       // [1 x |active|], simplex
  diff::Tensor fused;                       // [1 x D] = sum_b alpha_b z_b
  std::vector<diff::Tensor> branch_logits;  // per active branch, [1 x 2]
  diff::Tensor fused_logits;                // [1 x 2]
};

// Logit layout everywhere: index 0 = sim(., t0), index 1 = sim(., t1), so a
// label of 1 (anomalous) targets the anomaly similarity.
diff::Tensor sim_logits(diff::Tape& tape, const diff::Tensor& z,
                        const text::TextPair& pair);

FusionResult fuse(diff::Tape& tape, diff::ParamStore& store, const CrmConfig& cfg,
                  const csr::BranchBundle& bundle, const text::TextPair& pair,
                  const std::vector<csr::Branch>& active, bool frozen = false);

// Mixes per-branch patch margins with the attention weights of a forward
// pass: m_j = sum_b alpha_b m_{b,j}. Plain arithmetic, no tape involved.
std::vector<double> fuse_patches(const FusionResult& fusion,
                                 const std::vector<std::vector<double>>& margins);

}  // namespace ccl::crm
