#pragma once

// Paired contextual-state text embeddings. Each class gets a normal and an
// anomalous embedding built from small template sets, refined through the
// gated adapter pathway on the text encoder, plus the four text-space losses
// that shape the pair (decorrelation, prototype consistency, visual
// grounding, margin calibration).

#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/csr.hpp"
#include "ccl/diff.hpp"
#include "ccl/encoders.hpp"

namespace ccl::text {

struct TextRefError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PromptSet {
  std::string cls;
  std::vector<std::string> normal;      // state-0 templates
  std::vector<std::string> anomalous;   // state-1 templates
  std::vector<std::string> formatting;  // plain-caption forms; kept for
                                        // reporting, not part of the pair

  // Each state needs at least one template and every template must mention
  // the "{cls}" placeholder.
  void validate() const;
};

PromptSet default_prompt_set(const std::string& cls);

// Replaces "{cls}" with the class name. Any other "{...}" placeholder left in
// the template is an error.
std::string instantiate(const std::string& tmpl, const std::string& cls);

struct TextPair {
  diff::Tensor t0, t1;  // [1 x D], unit norm

  // Midpoint prototype (t0 + t1) / 2, recomputed from the current tensors.
  diff::Tensor prototype(diff::Tape& tape) const;
};

// Embeds every template of each state (instantiated with the class name,
// encoded with `hook` splicing the refinement adapters in), averages within
// the state, and unit-normalizes. An empty hook gives the frozen-encoder pair.
TextPair build_text_pair(diff::Tape& tape, const enc::TextEncoder& enc,
                         const PromptSet& prompts, const enc::LayerHook& hook = {});

// ---------------------------------------------------------------------------
// Text-space losses

// Squared inner product <t0, t1>^2.
diff::Tensor loss_ortho(diff::Tape& tape, const TextPair& pair);

// (1/2) (|t0 - tmu|^2 + |t1 - tmu|^2); algebraically (1/4) |t0 - t1|^2.
diff::Tensor loss_cons(diff::Tape& tape, const TextPair& pair);

// 1 - cos(tmu, v_cls). Degenerate prototype (t0 = -t1) is an error.
diff::Tensor loss_ground(diff::Tape& tape, const TextPair& pair,
                         const diff::Tensor& v_cls);

// Hinge [margin - <v, t1> + <v, t0>]_+ with plain inner products; meant for
// the cls embedding of an anomalous image.
diff::Tensor loss_calib(diff::Tape& tape, const TextPair& pair,
                        const diff::Tensor& v_cls, double margin);

struct TextLossWeights {
  double ortho = 0.10;  // annealed; see anneal_fraction
  double cons = 0.10;
  double ground = 0.05;
  double calib = 0.0;  // off by default
  double margin = 0.2;
  double anneal_fraction = 0.4;  // fraction of stage-1 progress to warm ortho

  void validate() const;
};

// Ortho weight at `progress` in [0,1]: linear from 0 to full over the first
// anneal_fraction of the stage, constant afterwards.
double effective_ortho_weight(const TextLossWeights& w, double progress);

// Weighted sum of the four terms. The calib term is only evaluated when its
// weight is nonzero.
diff::Tensor loss_text_total(diff::Tape& tape, const TextPair& pair,
                             const diff::Tensor& v_cls, const TextLossWeights& w,
                             double progress);

}  // namespace ccl::text
