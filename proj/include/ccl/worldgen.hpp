#pragma once

// Synthetic world for contextual anomaly detection. Each observation pairs a
// subject (masked foreground region) with a context (background); the label
// says whether that pairing is compatible. Subject appearance and mask
// placement depend only on (seed, subject, instance), so the same subject
// instance can be re-rendered into different contexts with a byte-identical
// foreground.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccl::world {

// Invalid or infeasible generation settings.
struct WorldError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct WorldSpec {
  int n_subjects = 15;
  int n_contexts = 12;
  int grid_h = 16, grid_w = 16;
  int feat_dim = 8;
  uint64_t seed = 1234;

  // Compatibility structure: unit-circle traits per subject/context decide
  // h(a, c) = [u_a . w_c >= 0], then minimal flips enforce the balance band.
  // Channel layout: subject traits in [0, trait_dim), context traits in
  // [trait_dim, 2*trait_dim), identity motifs in the remaining channels.
  int trait_dim = 2;
  double trait_amp = 1.0;    // trait bands, inside/outside the mask
  double motif_amp = 0.6;    // identity channels
  double noise_amp = 0.12;   // per-cell noise on context cells
  // Subjects vary much more than the backgrounds they stand in: appearance
  // noise on subject cells, in every channel. High values make the full-image
  // pathway prone to memorizing subject appearance instead of context.
  double subject_noise_amp = 0.12;
  double balance_lo = 0.4, balance_hi = 0.6;  // positive rate band per row/col

  // Global area band; each subject occupies a fixed narrower sub-band of it.
  double mask_area_lo = 0.25, mask_area_hi = 0.60;  // fraction of the grid

  // When non-empty, this table is used verbatim instead of the trait rule.
  // Shape must be n_subjects x n_contexts and every row needs both labels.
  // Size minimums and the balance band are not enforced in this mode.
  std::vector<std::vector<uint8_t>> explicit_compat;

  void validate() const;
  int cells() const { return grid_h * grid_w; }
};

struct World {
  WorldSpec spec;
  std::vector<std::vector<uint8_t>> compat;  // [subject][context] -> 1 if compatible
  std::vector<std::vector<double>> subj_trait, ctx_trait;  // unit vectors, trait_dim
  std::vector<std::vector<double>> subj_motif, ctx_motif;  // feat_dim templates
  int repair_flips = 0;  // table cells flipped away from the pure trait rule

  int compatible_count(int subject) const;
  std::vector<int> contexts_with_label(int subject, int label) const;
};

World build_world(const WorldSpec& spec);

enum class Split { kTrain, kVal, kCrossContext };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Observation {
  int subject = -1;
  int context = -1;
  int label = 0;  // 1 = incompatible pairing (anomaly)
  uint64_t instance = 0;
  Split split = Split::kTrain;
  std::vector<double> x;      // grid_h*grid_w*feat_dim, cell-major, channel fastest
  std::vector<uint8_t> mask;  // grid_h*grid_w, 1 inside the subject rectangle
};

Observation render(const World& w, int subject, int context, uint64_t instance);

// Extracts the masked rectangle's feature values in row-major order.
std::vector<double> subject_crop(const WorldSpec& spec, const Observation& obs);

struct SplitPlan {
  int train = 1676, val = 419, cross_context = 905;
  double jaccard_lo = 0.07, jaccard_hi = 0.27;  // context overlap band
  double balance_tol = 0.10;  // each split's anomaly rate within 0.5 +- tol
  uint64_t seed = 99;
  void validate() const;
};

struct Dataset {
  World world;
  SplitPlan plan;
  bool contextual = true;  // false marks a dataset meant for global-only models
  std::vector<Observation> samples;
  // Per subject: context ids available to train/val vs the cross-context split.
  std::vector<std::vector<int>> ss_pool, cc_pool;

  std::vector<int> indices(Split s) const;
  int n_classes() const { return world.spec.n_subjects; }
};

Dataset make_splits(const World& w, const SplitPlan& plan);

struct JaccardRow {
  int subject = 0;
  double jaccard = 0.0;  // realized context sets: (train+val) vs cross-context
  int n_train = 0, n_val = 0, n_cc = 0;
  int anom_train = 0, anom_val = 0, anom_cc = 0;
};

struct JaccardReport {
  std::vector<JaccardRow> rows;
  double min_jaccard = 0.0, max_jaccard = 0.0;
  double anomaly_rate_train = 0.0, anomaly_rate_val = 0.0, anomaly_rate_cc = 0.0;
};

JaccardReport jaccard_report(const Dataset& ds);

enum class SupportMode { kBalanced, kNormalOnly };
const char* support_mode_name(SupportMode m);

// Indices into ds.samples, drawn from the train split. Balanced mode takes
// exactly `shots` normal + `shots` anomalous observations per subject;
// normal-only takes `shots` normals per subject and nothing else.
std::vector<int> sample_fewshot(const Dataset& ds, int shots, SupportMode mode,
                                uint64_t seed);

struct CollisionPair {
  int subject = -1, ctx_normal = -1, ctx_anomalous = -1;
  Observation normal_obs, anomalous_obs;  // identical subject region
};

// Same subject instance rendered into a compatible and an incompatible
// context. Any score computed from the subject region alone ties on the two.
CollisionPair collision_pair(const World& w, uint64_t seed);

// Export/import. Directory layout: manifest.json + blobs/*.bin; the manifest
// records the full generation config and a content hash over all feature
// payloads, verified on import.
void export_dataset(const Dataset& ds, const std::string& dir);
Dataset import_dataset(const std::string& dir);
uint64_t dataset_content_hash(const Dataset& ds);

}  // namespace ccl::world
