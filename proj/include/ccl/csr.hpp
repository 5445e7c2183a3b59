#pragma once

// Context-Selective Residuals: gated residual adapters spliced into the first
// k_apply encoder layers of each branch. Every adapted layer blends its input
// with a small MLP of that input, X <- (1-lambda) X + lambda MLP(X), where
// lambda = sigmoid(rho) is a learned gate. The same machinery drives the text
// refinement pathway (a different parameter prefix and layer count).

#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/diff.hpp"
#include "ccl/encoders.hpp"
#include "ccl/worldgen.hpp"

namespace ccl::csr {

struct CsrError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdapterConfig {
  int width = 32;    // embedding dim D; MLP hidden width equals D
  int bank = 4;      // per-layer modules allocated
  int k_apply = 4;   // layers actually adapted (<= bank); the rest stay put
  uint64_t seed = 31;

  void validate() const;
};

// Parameter names for layer i under `prefix`, e.g. "csr.s.l0.w1".
std::string param_name(const std::string& prefix, int layer, const char* field);

// Registers w1/b1/w2/b2/gate for every bank layer. The output layer (w2, b2)
// starts at zero and the gate at rho = -2, so a freshly added adapter blends
// (1-lambda) of the input with nothing: the encoder function is preserved up
// to a per-layer shrink that training can undo or exploit.
void add_adapter_params(diff::ParamStore& store, const std::string& prefix,
                        const AdapterConfig& cfg);

// True when every parameter of the prefix's bank is present.
bool has_adapter_params(const diff::ParamStore& store, const std::string& prefix,
                        const AdapterConfig& cfg);

// Current gate values lambda_i = sigmoid(rho_i), one per bank layer.
std::vector<double> gate_values(const diff::ParamStore& store,
                                const std::string& prefix, const AdapterConfig& cfg);

// One gated update on a token matrix [n x D]. `layer` is 0-based and must be
// below cfg.k_apply; calling on an unadapted layer is a caller bug.
diff::Tensor csr_layer_update(diff::Tape& tape, diff::ParamStore& store,
                              const std::string& prefix, const AdapterConfig& cfg,
                              const diff::Tensor& x, int layer, bool frozen = false);

// Hook applying csr_layer_update to layers 0..k_apply-1 and passing the rest
// through. Errors when the adapter wants more layers than the encoder has.
enc::LayerHook make_hook(diff::ParamStore& store, const std::string& prefix,
                         const AdapterConfig& cfg, int encoder_layers,
                         bool frozen = false);

// ---------------------------------------------------------------------------
// Branch refinement

enum class Branch { kSubject = 0, kContext = 1, kGlobal = 2 };
const char* branch_name(Branch b);
const char* branch_prefix(Branch b);  // "csr.s" / "csr.c" / "csr.g"

struct BranchBundle {
  // Final cls rows [1 x D] and patch matrices [(N-1) x D], one per branch.
  diff::Tensor cls_s, cls_c, cls_g;
  diff::Tensor patches_s, patches_c, patches_g;

  const diff::Tensor& cls(Branch b) const;
  const diff::Tensor& patches(Branch b) const;
};

struct RefineOptions {
  // Training splits the observation into masked views; inference feeds the
  // full image to all three branches unless use_masks asks otherwise.
  bool training = false;
  bool use_masks = false;
  bool frozen = false;  // adapters as constants: nothing recorded for backward
};

// Runs the three branch pathways over one observation. Each branch has its
// own adapter bank (prefixes above); all share the frozen encoder.
BranchBundle refine_branches(diff::Tape& tape, const enc::VisualEncoder& enc,
                             diff::ParamStore& store, const AdapterConfig& cfg,
                             const world::WorldSpec& spec,
                             const world::Observation& obs,
                             const RefineOptions& opt);

}  // namespace ccl::csr
