#pragma once

// Assembles the full detector: frozen encoders, three visual adapter banks,
// the text refinement bank, CRM projections, per-class prompt sets, and the
// trainable parameter store. Operations here are the forward-pass plumbing
// that training, scoring, and the CLI all share.

#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/crm.hpp"
#include "ccl/csr.hpp"
#include "ccl/diff.hpp"
#include "ccl/encoders.hpp"
#include "ccl/textref.hpp"
#include "ccl/worldgen.hpp"

namespace ccl::model {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Fusion { kCrm, kAverage, kStaticWeights, kConcatLinear };
const char* fusion_name(Fusion f);
Fusion fusion_from_name(const std::string& name);

struct ModelConfig {
  int width = 32;          // shared embedding dim D
  int visual_layers = 4;   // L_v
  int text_layers = 3;     // L_t
  int patch = 4;
  int k_apply = 6;         // CSR depth request; clipped to L_v at build
  int tr_apply = 3;        // text refinement depth; clipped to L_t
  int attn = 32;           // D_a
  uint64_t seed = 2024;

  bool use_csr = true;
  bool use_text_refine = true;
  Fusion fusion = Fusion::kCrm;
  std::vector<csr::Branch> active = {csr::Branch::kSubject, csr::Branch::kContext,
                                     csr::Branch::kGlobal};
  bool query_from_normal = false;  // CRM ablation knob
  double logit_temperature = 1.0;  // divides CE logits; 1 = paper form
  text::TextLossWeights text_weights;

  void validate() const;
};

struct Model {
  ModelConfig cfg;
  world::WorldSpec world_spec;  // grid geometry the encoders were built for
  enc::VisualEncoder visual;
  enc::TextEncoder text_encoder;
  csr::AdapterConfig adapter_cfg;     // per-branch visual banks
  csr::AdapterConfig tr_cfg;          // text refinement bank ("tr")
  crm::CrmConfig crm_cfg;
  diff::ParamStore params;
  std::vector<text::PromptSet> prompts;  // one per subject class

  int n_classes() const { return static_cast<int>(prompts.size()); }
};

// Builds encoders and registers every trainable parameter group. Class
// prompt sets default to the standard templates instantiated per subject.
Model build_model(const ModelConfig& cfg, const world::WorldSpec& ws, int n_classes);

// The refinement hook for one visual branch, or an empty hook when CSR is
// disabled (pure frozen encoder).
enc::LayerHook visual_hook(Model& m, csr::Branch b, bool frozen);

// Branch bundle for one observation, honoring use_csr.
csr::BranchBundle refine(diff::Tape& tape, Model& m, const world::Observation& obs,
                         const csr::RefineOptions& opt);

// Class text pair, through the refinement pathway unless disabled.
text::TextPair class_pair(diff::Tape& tape, Model& m, int cls, bool frozen);

// All class pairs evaluated with gradients off; reusable across tapes.
std::vector<text::TextPair> frozen_class_pairs(Model& m);

}  // namespace ccl::model
