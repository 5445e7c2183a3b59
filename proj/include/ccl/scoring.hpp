#pragma once

// Inference-time anomaly scoring and the metric suite. Image scores come from
// the fused cosine margin, pixel maps from attention-mixed patch margins, and
// the metrics (AUROC, AUPR, PRO) are computed exactly so they can be pinned
// against brute-force oracles. Protocol runners tie training and evaluation
// together for the standard few-shot settings.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/crm.hpp"
#include "ccl/csr.hpp"
#include "ccl/model.hpp"
#include "ccl/objective.hpp"
#include "ccl/textref.hpp"
#include "ccl/worldgen.hpp"

namespace ccl::score {

struct ScoringError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Image-level anomaly score: sigmoid of the anomalous-minus-normal similarity
// margin carried by the fused logits. Strictly inside (0, 1); invariant under
// a common shift of both similarities.
double score_image(const crm::FusionResult& fusion);

struct PixelMap {
  int h = 0, w = 0;
  std::vector<double> v;  // row-major

  double at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
};

// Per-branch patch margins sim(p_j, t1) - sim(p_j, t0), mixed with the
// attention weights already in `fusion`, reshaped to the spatial token grid
// and bilinearly upsampled to out_h x out_w. The token grid is inferred as
// square unless grid_h/grid_w are supplied.
PixelMap score_pixels(const crm::FusionResult& fusion,
                      const csr::BranchBundle& bundle, const text::TextPair& pair,
                      int out_h, int out_w, int grid_h = 0, int grid_w = 0);

// ---------------------------------------------------------------------------
// Metrics. Labels mark the positive (anomalous) class with 1.

// Rank statistic P(s_anom > s_norm) + half credit for ties, computed via one
// sort. Matches the O(n^2) pairwise count bit for bit.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the precision-recall curve with step-wise interpolation; tied
// scores enter as one group.
double aupr(const std::vector<double>& scores, const std::vector<int>& labels);

// Per-region overlap: mean recall over 4-connected ground-truth components,
// integrated over the realized FPR curve up to fpr_cap and normalized by it.
// Thresholds are strict (prediction = value > t), so a constant map scores 0.
double pro(const std::vector<PixelMap>& maps,
           const std::vector<std::vector<uint8_t>>& masks, double fpr_cap = 0.3);

// ---------------------------------------------------------------------------
// Evaluation and protocols

enum class Protocol { kFewshotCc, kNormalOnlyCc, kInDistribution };
const char* protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);

struct EvalOptions {
  bool use_masks = false;     // masked branch views at eval time
  bool oracle = false;        // score from the world's true rule (sanity leak)
  bool pixel_metrics = true;  // P-AUROC and PRO from maps vs subject masks
  double fpr_cap = 0.3;
};

struct SampleRecord {
  int index = -1;  // position in dataset.samples
  int subject = -1, context = -1, label = 0;
  double score = 0.0;
  std::vector<double> alpha;  // one weight per active branch
};

struct ClassRow {
  int subject = -1;
  int n = 0, n_anom = 0;
  bool image_valid = false;  // both labels present in the split
  double i_auroc = 0.0, i_aupr = 0.0;
  bool pixel_valid = false;  // anomalous and normal pixels both present
  double p_auroc = 0.0, pro = 0.0;
  std::vector<double> alpha_mean;  // per active branch
};

struct MetricResult {
  world::Split split = world::Split::kCrossContext;
  int n = 0, n_anom = 0;
  double i_auroc = 0.0, i_aupr = 0.0;
  bool pixel_valid = false;
  double p_auroc = 0.0, pro = 0.0;
  std::vector<csr::Branch> branches;  // column order of the alpha vectors
  std::vector<double> alpha_mean;
  std::vector<ClassRow> per_class;
  std::vector<SampleRecord> samples;
};

// Scores every sample of the split with gradients off and reduces to the
// metric table. Pixel ground truth: the subject mask for anomalous samples,
// all-zero for normal ones. Throws when the split is empty or single-class.
MetricResult evaluate(model::Model& m, const world::Dataset& ds,
                      world::Split split, const EvalOptions& opt = {});

// Trains per the protocol (support composition + evaluation split) and
// evaluates: few-shot and normal-only report on the cross-context split,
// in-distribution on the validation split.
MetricResult run_protocol(Protocol kind, model::Model& m,
                          const world::Dataset& ds, const obj::TrainPlan& plan,
                          const EvalOptions& opt = {});

// Fixed-width per-class table plus a summary line.
std::string format_report(const MetricResult& r);

}  // namespace ccl::score
