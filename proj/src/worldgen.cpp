#include "ccl/worldgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ccl/io.hpp"
#include "ccl/rng.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ccl::world {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ---------------------------------------------------------------------------
// Spec validation

void WorldSpec::validate() const {
  if (grid_h < 4 || grid_w < 4) throw WorldError("grid must be at least 4x4");
  if (feat_dim < 2 * trait_dim + 1)
    throw WorldError(
        "feat_dim must exceed both trait bands (subject traits, context traits, "
        "plus at least one identity channel)");
  if (trait_dim < 2) throw WorldError("trait_dim must be at least 2");
  if (!(mask_area_lo > 0.0) || !(mask_area_hi < 1.0) || mask_area_lo >= mask_area_hi)
    throw WorldError("mask area band must satisfy 0 < lo < hi < 1");
  if (!(subject_noise_amp >= 0.0))
    throw WorldError("subject_noise_amp must be non-negative");

  if (!explicit_compat.empty()) {
    // Hand-written table: shape and the both-labels rule are all we require.
    if (n_subjects < 1 || n_contexts < 2)
      throw WorldError("explicit table needs at least 1 subject and 2 contexts");
    if (static_cast<int>(explicit_compat.size()) != n_subjects)
      throw WorldError("explicit table has wrong subject count");
    for (const auto& row : explicit_compat) {
      if (static_cast<int>(row.size()) != n_contexts)
        throw WorldError("explicit table has wrong context count");
      int pos = 0;
      for (uint8_t v : row) pos += v ? 1 : 0;
      if (pos == 0 || pos == n_contexts)
        throw WorldError("explicit table row lacks one of the labels; "
                         "every subject needs a compatible and an incompatible context");
    }
    return;
  }

  if (n_subjects < 2) throw WorldError("need at least 2 subjects");
  if (n_contexts < 4) throw WorldError("need at least 4 contexts");
  if (!(balance_lo > 0.0) || !(balance_hi < 1.0) || balance_lo >= balance_hi)
    throw WorldError("balance band must satisfy 0 < lo < hi < 1");
  // The band must admit an integer count of compatible contexts per subject.
  if (static_cast<int>(std::ceil(balance_lo * n_contexts)) >
      static_cast<int>(std::floor(balance_hi * n_contexts)))
    throw WorldError("balance band admits no integer compatible-context count for " +
                     std::to_string(n_contexts) + " contexts");
}

// ---------------------------------------------------------------------------
// World construction

int World::compatible_count(int subject) const {
  int n = 0;
  for (uint8_t v : compat.at(subject)) n += v;
  return n;
}

std::vector<int> World::contexts_with_label(int subject, int label) const {
  std::vector<int> out;
  const auto& row = compat.at(subject);
  for (int c = 0; c < static_cast<int>(row.size()); ++c)
    if ((row[c] ? 0 : 1) == label) out.push_back(c);
  return out;
}

namespace {

// Margin of the trait rule for cell (a, c); used to pick the least damaging
// flips during balance repair. The rule vector is the subject's privately
// rotated trait, so no single bilinear form explains the whole table.
double trait_margin(const World& w, int a, int c) {
  double dot = 0.0;
  for (int k = 0; k < w.spec.trait_dim; ++k)
    dot += w.subj_rule[a][k] * w.ctx_trait[c][k];
  return dot;
}

int row_sum(const World& w, int a) {
  int s = 0;
  for (uint8_t v : w.compat[a]) s += v;
  return s;
}

int col_sum(const World& w, int c) {
  int s = 0;
  for (int a = 0; a < w.spec.n_subjects; ++a) s += w.compat[a][c];
  return s;
}

// Balance repair in three provably terminating stages:
//   1. clamp every row sum into [row_lo, row_hi] (flip boundary cells);
//   2. nudge the grand total into [nc*col_lo, nc*col_hi] without leaving
//      the row band;
//   3. fix out-of-band columns with paired flips inside one row (one cell
//      up, one down), which keeps row sums intact and shrinks the column
//      excess by one per step. A valid partner column always exists once
//      the total is in range.
void repair_balance(World& w, int row_lo, int row_hi, int col_lo, int col_hi,
                    int& flips) {
  int na = w.spec.n_subjects, nc = w.spec.n_contexts;

  auto flip = [&](int a, int c) {
    w.compat[a][c] ^= 1;
    ++flips;
  };

  // Stage 1: rows.
  for (int a = 0; a < na; ++a) {
    int pos = row_sum(w, a);
    while (pos < row_lo || pos > row_hi) {
      bool need_pos = pos < row_lo;
      int best = -1;
      double best_m = 1e300;
      for (int c = 0; c < nc; ++c) {
        if ((w.compat[a][c] != 0) == need_pos) continue;
        double m = std::abs(trait_margin(w, a, c));
        if (m < best_m) { best_m = m; best = c; }
      }
      flip(a, best);
      pos += need_pos ? 1 : -1;
    }
  }

  // Stage 2: total.
  if (na * row_lo > nc * col_hi || na * row_hi < nc * col_lo)
    throw WorldError("row and column balance bands are jointly infeasible");
  auto total = [&] {
    int t = 0;
    for (int a = 0; a < na; ++a) t += row_sum(w, a);
    return t;
  };
  int T = total();
  while (T > nc * col_hi || T < nc * col_lo) {
    bool lower = T > nc * col_hi;
    int best_a = -1, best_c = -1;
    double best_m = 1e300;
    for (int a = 0; a < na; ++a) {
      int s = row_sum(w, a);
      if (lower ? s <= row_lo : s >= row_hi) continue;
      for (int c = 0; c < nc; ++c) {
        if ((w.compat[a][c] != 0) != lower) continue;
        double m = std::abs(trait_margin(w, a, c));
        if (m < best_m) { best_m = m; best_a = a; best_c = c; }
      }
    }
    if (best_a < 0)
      throw WorldError("balance repair: cannot adjust total within the row band");
    flip(best_a, best_c);
    T += lower ? -1 : 1;
  }

  // Stage 3: columns via in-row pair flips.
  for (int guard = 0; guard < na * nc * 4; ++guard) {
    int bad = -1, bad_sum = 0;
    for (int c = 0; c < nc; ++c) {
      int s = col_sum(w, c);
      if (s < col_lo || s > col_hi) { bad = c; bad_sum = s; break; }
    }
    if (bad < 0) return;
    bool surplus = bad_sum > col_hi;
    // Partner: a column able to absorb (or donate) one unit.
    int best_a = -1, best_c = -1;
    double best_m = 1e300;
    for (int c = 0; c < nc; ++c) {
      if (c == bad) continue;
      int s = col_sum(w, c);
      if (surplus ? s >= col_hi : s <= col_lo) continue;
      for (int a = 0; a < na; ++a) {
        bool pattern = surplus ? (w.compat[a][bad] && !w.compat[a][c])
                               : (!w.compat[a][bad] && w.compat[a][c]);
        if (!pattern) continue;
        double m = std::abs(trait_margin(w, a, bad)) + std::abs(trait_margin(w, a, c));
        if (m < best_m) { best_m = m; best_a = a; best_c = c; }
      }
    }
    if (best_a < 0)
      throw WorldError("balance repair: no pair flip available for column " +
                       std::to_string(bad));
    flip(best_a, bad);
    flip(best_a, best_c);
  }
  throw WorldError("balance repair did not converge; widen the balance band");
}

}  // namespace

World build_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.spec = spec;

  Rng rng(derive_seed(spec.seed, {0x77061d}));

  // Traits: evenly spaced unit vectors with seeded jitter. Extra trait
  // dimensions beyond the first two stay zero; the circle already gives the
  // compatibility rule full rank.
  auto make_traits = [&](int n) {
    std::vector<std::vector<double>> t(n, std::vector<double>(spec.trait_dim, 0.0));
    for (int i = 0; i < n; ++i) {
      double ang = 2.0 * kPi * (i + 0.3 * rng.uniform(-1.0, 1.0)) / n;
      t[i][0] = std::cos(ang);
      t[i][1] = std::sin(ang);
    }
    return t;
  };
  w.subj_trait = make_traits(spec.n_subjects);
  w.ctx_trait = make_traits(spec.n_contexts);

  // What counts as a fitting context is private to each subject: the rule
  // half-plane is the subject trait rotated by a subject-specific angle.
  // Knowing both rendered traits is therefore not enough to predict the
  // label; the rotation can only be picked up from that subject's examples.
  w.subj_rule.assign(spec.n_subjects, std::vector<double>(spec.trait_dim, 0.0));
  for (int a = 0; a < spec.n_subjects; ++a) {
    double phi = rng.uniform(0.0, 2.0 * kPi);
    double cs = std::cos(phi), sn = std::sin(phi);
    w.subj_rule[a][0] = cs * w.subj_trait[a][0] - sn * w.subj_trait[a][1];
    w.subj_rule[a][1] = sn * w.subj_trait[a][0] + cs * w.subj_trait[a][1];
  }

  if (!spec.explicit_compat.empty()) {
    // Hand-written table wins; traits keep driving the rendered channels.
    w.compat = spec.explicit_compat;
  } else {
    w.compat.assign(spec.n_subjects, std::vector<uint8_t>(spec.n_contexts, 0));
    for (int a = 0; a < spec.n_subjects; ++a)
      for (int c = 0; c < spec.n_contexts; ++c)
        w.compat[a][c] = trait_margin(w, a, c) >= 0.0 ? 1 : 0;

    // Balance repair: positive counts per row and per column forced into the
    // integer band.
    int row_lo = static_cast<int>(std::ceil(spec.balance_lo * spec.n_contexts));
    int row_hi = static_cast<int>(std::floor(spec.balance_hi * spec.n_contexts));
    int col_lo = static_cast<int>(std::ceil(spec.balance_lo * spec.n_subjects));
    int col_hi = static_cast<int>(std::floor(spec.balance_hi * spec.n_subjects));
    if (col_lo > col_hi)
      throw WorldError("balance band admits no integer compatible-subject count for " +
                       std::to_string(spec.n_subjects) + " subjects");
    int flips = 0;
    repair_balance(w, row_lo, row_hi, col_lo, col_hi, flips);
  }
  // Report how far the final table sits from the pure trait rule.
  w.repair_flips = 0;
  for (int a = 0; a < spec.n_subjects; ++a)
    for (int c = 0; c < spec.n_contexts; ++c)
      if (w.compat[a][c] != (trait_margin(w, a, c) >= 0.0 ? 1 : 0)) ++w.repair_flips;

  // No degenerate subject: the tri-branch task needs both labels everywhere.
  for (int a = 0; a < spec.n_subjects; ++a) {
    int pos = row_sum(w, a);
    if (pos == 0 || pos == spec.n_contexts)
      throw WorldError("subject " + std::to_string(a) +
                       " has a single-label context row");
  }

  // Cell templates. Subject traits and context traits occupy disjoint channel
  // bands so that region content stays identifiable after pooling: a model
  // reading the context band from a full image sees the same values it would
  // on a context-only view. The remaining channels carry per-identity motifs,
  // shared between the two populations.
  auto make_motifs = [&](const std::vector<std::vector<double>>& traits, int n,
                         int band) {
    std::vector<std::vector<double>> m(n, std::vector<double>(spec.feat_dim, 0.0));
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < spec.trait_dim; ++k)
        m[i][band * spec.trait_dim + k] = spec.trait_amp * traits[i][k];
      for (int k = 2 * spec.trait_dim; k < spec.feat_dim; ++k)
        m[i][k] = spec.motif_amp * rng.normal();
    }
    return m;
  };
  w.subj_motif = make_motifs(w.subj_trait, spec.n_subjects, 0);
  w.ctx_motif = make_motifs(w.ctx_trait, spec.n_contexts, 1);
  return w;
}

// ---------------------------------------------------------------------------
// Rendering

Observation render(const World& w, int subject, int context, uint64_t instance) {
  const auto& spec = w.spec;
  if (subject < 0 || subject >= spec.n_subjects)
    throw WorldError("subject id " + std::to_string(subject) + " out of range");
  if (context < 0 || context >= spec.n_contexts)
    throw WorldError("context id " + std::to_string(context) + " out of range");

  Observation obs;
  obs.subject = subject;
  obs.context = context;
  obs.instance = instance;
  obs.label = w.compat[subject][context] ? 0 : 1;

  // Everything about the subject (mask geometry and foreground content) is a
  // function of (seed, subject, instance) alone, never of the context.
  Rng subj_rng(derive_seed(spec.seed, {0xa51d, static_cast<uint64_t>(subject), instance}));
  Rng ctx_rng(derive_seed(spec.seed, {0xc047e, static_cast<uint64_t>(context), instance}));

  int H = spec.grid_h, W = spec.grid_w;
  // Each subject has a characteristic size: a fixed sub-band of the global
  // area band, so classes differ in how much of the frame they fill. The
  // band center depends on (seed, subject) only.
  double half = 0.15 * (spec.mask_area_hi - spec.mask_area_lo);
  Rng size_rng(derive_seed(spec.seed, {0x517e5ull, static_cast<uint64_t>(subject)}));
  double center = size_rng.uniform(spec.mask_area_lo + half, spec.mask_area_hi - half);
  double area = spec.cells() * subj_rng.uniform(center - half, center + half);
  double aspect = subj_rng.uniform(0.6, 1.0 / 0.6);
  int rw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 2, W - 1);
  int rh = std::clamp(static_cast<int>(std::lround(area / rw)), 2, H - 1);
  int x0 = subj_rng.range(0, W - rw + 1);
  int y0 = subj_rng.range(0, H - rh + 1);

  obs.mask.assign(spec.cells(), 0);
  for (int y = y0; y < y0 + rh; ++y)
    for (int x = x0; x < x0 + rw; ++x) obs.mask[y * W + x] = 1;

  obs.x.assign(static_cast<size_t>(spec.cells()) * spec.feat_dim, 0.0);
  const auto& sm = w.subj_motif[subject];
  const auto& cm = w.ctx_motif[context];
  // Foreground cells draw from subj_rng in row-major order; since the mask is
  // also a pure function of subj_rng, the foreground bytes are identical
  // across contexts for a fixed (subject, instance).
  for (int cell = 0; cell < spec.cells(); ++cell) {
    if (!obs.mask[cell]) continue;
    double* px = &obs.x[static_cast<size_t>(cell) * spec.feat_dim];
    for (int k = 0; k < spec.feat_dim; ++k)
      px[k] = sm[k] + spec.subject_noise_amp * subj_rng.normal();
  }
  for (int cell = 0; cell < spec.cells(); ++cell) {
    if (obs.mask[cell]) continue;
    double* px = &obs.x[static_cast<size_t>(cell) * spec.feat_dim];
    for (int k = 0; k < spec.feat_dim; ++k)
      px[k] = cm[k] + spec.noise_amp * ctx_rng.normal();
  }
  return obs;
}

std::vector<double> subject_crop(const WorldSpec& spec, const Observation& obs) {
  std::vector<double> crop;
  for (int cell = 0; cell < spec.cells(); ++cell)
    if (obs.mask[cell])
      for (int k = 0; k < spec.feat_dim; ++k)
        crop.push_back(obs.x[static_cast<size_t>(cell) * spec.feat_dim + k]);
  return crop;
}

// ---------------------------------------------------------------------------
// Splits

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kCrossContext: return "cross_context";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "cross_context") return Split::kCrossContext;
  throw WorldError("unknown split '" + name + "'");
}

void SplitPlan::validate() const {
  if (train < 2 || val < 2 || cross_context < 2)
    throw WorldError("each split needs at least 2 samples");
  if (!(jaccard_lo >= 0.0) || !(jaccard_hi <= 1.0) || jaccard_lo > jaccard_hi)
    throw WorldError("jaccard band must satisfy 0 <= lo <= hi <= 1");
  if (!(balance_tol > 0.0) || balance_tol > 0.5)
    throw WorldError("balance_tol must lie in (0, 0.5]");
}

std::vector<int> Dataset::indices(Split s) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i)
    if (samples[i].split == s) out.push_back(i);
  return out;
}

namespace {

// Picks the shared-context count `o` so the realized Jaccard o / n_contexts
// falls inside the requested band (the cross-context pool reuses `o` contexts
// from the train pool and owns the rest, so the union is always n_contexts).
int pick_overlap(const WorldSpec& ws, const SplitPlan& plan) {
  int nc = ws.n_contexts;
  int lo = static_cast<int>(std::ceil(plan.jaccard_lo * nc - 1e-9));
  int hi = static_cast<int>(std::floor(plan.jaccard_hi * nc + 1e-9));
  lo = std::max(lo, 0);
  hi = std::min(hi, nc);
  if (lo > hi) {
    std::ostringstream os;
    os << "jaccard band [" << plan.jaccard_lo << ", " << plan.jaccard_hi
       << "] is infeasible with " << nc << " contexts; achievable values are k/"
       << nc << " for k = 0.." << nc;
    throw WorldError(os.str());
  }
  // Mid-band target.
  int target = static_cast<int>(
      std::lround(0.5 * (plan.jaccard_lo + plan.jaccard_hi) * nc));
  return std::clamp(target, lo, hi);
}

int label_of(const World& w, int subject, int context) {
  return w.compat[subject][context] ? 0 : 1;
}

// Ensures a context pool carries both labels for the subject; swaps with the
// complement pool when it does not.
void ensure_both_labels(const World& w, int subject, std::vector<int>& pool,
                        std::vector<int>& other) {
  for (int want : {0, 1}) {
    bool have = false;
    for (int c : pool)
      if (label_of(w, subject, c) == want) { have = true; break; }
    if (have) continue;
    // Find a donor in `other` with the wanted label and a cell in `pool`
    // whose label the other pool still keeps after the swap.
    for (size_t i = 0; i < other.size() && !have; ++i) {
      if (label_of(w, subject, other[i]) != want) continue;
      for (size_t j = 0; j < pool.size(); ++j) {
        int lbl = label_of(w, subject, pool[j]);
        int count = 0;
        for (int c : other)
          if (label_of(w, subject, c) == want) ++count;
        if (count < 2 && lbl != want) continue;  // would strip `other`
        std::swap(pool[j], other[i]);
        have = true;
        break;
      }
    }
    if (!have)
      throw WorldError("could not give subject " + std::to_string(subject) +
                       " both labels in each context pool");
  }
}

}  // namespace

Dataset make_splits(const World& w, const SplitPlan& plan) {
  plan.validate();
  const auto& ws = w.spec;
  Dataset ds;
  ds.world = w;
  ds.plan = plan;

  int overlap = pick_overlap(ws, plan);
  int nc = ws.n_contexts;
  // Exclusive cross-context share: a third of the contexts (at least one).
  int cc_exclusive = std::max(1, nc / 3);
  if (overlap == nc) cc_exclusive = 0;  // identical pools requested
  int ss_size = nc - cc_exclusive;
  if (ss_size < 2 || (cc_exclusive + overlap) < 1)
    throw WorldError("context pools degenerate; adjust jaccard band or context count");

  Rng pool_rng(derive_seed(plan.seed, {0x900c5}));
  ds.ss_pool.resize(ws.n_subjects);
  ds.cc_pool.resize(ws.n_subjects);
  for (int a = 0; a < ws.n_subjects; ++a) {
    std::vector<int> ctxs(nc);
    for (int c = 0; c < nc; ++c) ctxs[c] = c;
    pool_rng.shuffle(ctxs);
    std::vector<int> ss(ctxs.begin(), ctxs.begin() + ss_size);
    std::vector<int> cc(ctxs.begin() + ss_size, ctxs.end());
    // Shared contexts: the tail of the train pool joins the cc pool.
    for (int o = 0; o < overlap; ++o) cc.push_back(ss[ss.size() - 1 - o]);
    ensure_both_labels(w, a, ss, cc);
    // The swap fixing ss may have removed a label from cc; fix cc against the
    // leftover contexts of ss (never undoing ss's guarantee: donors must keep
    // ss intact, which ensure_both_labels enforces symmetrically).
    ensure_both_labels(w, a, cc, ss);
    ensure_both_labels(w, a, ss, cc);
    std::sort(ss.begin(), ss.end());
    std::sort(cc.begin(), cc.end());
    ds.ss_pool[a] = std::move(ss);
    ds.cc_pool[a] = std::move(cc);
  }

  // Observations: per split, subjects round-robin, labels alternating, so
  // counts and anomaly rates are balanced by construction.
  uint64_t instance_counter = 1;
  Rng draw_rng(derive_seed(plan.seed, {0xd4a3}));
  auto emit = [&](Split split, int total) {
    for (int i = 0; i < total; ++i) {
      int a = i % ws.n_subjects;
      int want = (i / ws.n_subjects) % 2;  // alternate per subject
      const auto& pool =
          split == Split::kCrossContext ? ds.cc_pool[a] : ds.ss_pool[a];
      std::vector<int> options;
      for (int c : pool)
        if (label_of(w, a, c) == want) options.push_back(c);
      if (options.empty())
        throw WorldError("subject " + std::to_string(a) + " has no label-" +
                         std::to_string(want) + " context in its pool");
      int c = options[draw_rng.below(options.size())];
      Observation obs = render(w, a, c, instance_counter++);
      obs.split = split;
      ds.samples.push_back(std::move(obs));
    }
  };
  emit(Split::kTrain, plan.train);
  emit(Split::kVal, plan.val);
  emit(Split::kCrossContext, plan.cross_context);

  // Verify the anomaly-rate contract actually holds.
  auto rate = [&](Split s) {
    int n = 0, anom = 0;
    for (const auto& obs : ds.samples)
      if (obs.split == s) { ++n; anom += obs.label; }
    return n ? static_cast<double>(anom) / n : 0.0;
  };
  for (Split s : {Split::kTrain, Split::kVal, Split::kCrossContext}) {
    double r = rate(s);
    if (std::abs(r - 0.5) > plan.balance_tol)
      throw WorldError(std::string("anomaly rate of split '") + split_name(s) +
                       "' is " + std::to_string(r) + ", outside 0.5 +- " +
                       std::to_string(plan.balance_tol));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Reports

JaccardReport jaccard_report(const Dataset& ds) {
  const auto& ws = ds.world.spec;
  if (ds.samples.empty()) throw WorldError("jaccard_report: dataset has no samples");
  JaccardReport rep;
  rep.min_jaccard = 1e300;
  rep.max_jaccard = -1e300;
  int n_tr = 0, n_va = 0, n_cc = 0, a_tr = 0, a_va = 0, a_cc = 0;
  for (int a = 0; a < ws.n_subjects; ++a) {
    JaccardRow row;
    row.subject = a;
    std::set<int> ss_ctx, cc_ctx;
    for (const auto& obs : ds.samples) {
      if (obs.subject != a) continue;
      switch (obs.split) {
        case Split::kTrain:
          ++row.n_train;
          row.anom_train += obs.label;
          ss_ctx.insert(obs.context);
          break;
        case Split::kVal:
          ++row.n_val;
          row.anom_val += obs.label;
          ss_ctx.insert(obs.context);
          break;
        case Split::kCrossContext:
          ++row.n_cc;
          row.anom_cc += obs.label;
          cc_ctx.insert(obs.context);
          break;
      }
    }
    if (row.n_train + row.n_val == 0 || row.n_cc == 0)
      throw WorldError("subject " + std::to_string(a) +
                       " is missing from a split; jaccard undefined");
    // Overlap of the context allocations (pools), not of the sampled
    // multisets: the pools are what the split design controls.
    std::set<int> pool_ss(ds.ss_pool[a].begin(), ds.ss_pool[a].end());
    std::set<int> pool_cc(ds.cc_pool[a].begin(), ds.cc_pool[a].end());
    std::vector<int> inter;
    std::set_intersection(pool_ss.begin(), pool_ss.end(), pool_cc.begin(),
                          pool_cc.end(), std::back_inserter(inter));
    std::set<int> uni(pool_ss);
    uni.insert(pool_cc.begin(), pool_cc.end());
    row.jaccard = static_cast<double>(inter.size()) / static_cast<double>(uni.size());
    // Sampled contexts must stay inside their pools.
    for (int c : ss_ctx)
      if (!pool_ss.count(c))
        throw WorldError("train/val sample outside the subject's context pool");
    for (int c : cc_ctx)
      if (!pool_cc.count(c))
        throw WorldError("cross-context sample outside the subject's context pool");
    rep.min_jaccard = std::min(rep.min_jaccard, row.jaccard);
    rep.max_jaccard = std::max(rep.max_jaccard, row.jaccard);
    n_tr += row.n_train;
    n_va += row.n_val;
    n_cc += row.n_cc;
    a_tr += row.anom_train;
    a_va += row.anom_val;
    a_cc += row.anom_cc;
    rep.rows.push_back(row);
  }
  rep.anomaly_rate_train = n_tr ? static_cast<double>(a_tr) / n_tr : 0.0;
  rep.anomaly_rate_val = n_va ? static_cast<double>(a_va) / n_va : 0.0;
  rep.anomaly_rate_cc = n_cc ? static_cast<double>(a_cc) / n_cc : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Few-shot support

const char* support_mode_name(SupportMode m) {
  return m == SupportMode::kBalanced ? "balanced" : "normal_only";
}

std::vector<int> sample_fewshot(const Dataset& ds, int shots, SupportMode mode,
                                uint64_t seed) {
  if (shots < 1) throw WorldError("shots must be positive");
  const auto& ws = ds.world.spec;
  // Per subject and label, the train-split indices.
  std::vector<std::vector<int>> normals(ws.n_subjects), anomalies(ws.n_subjects);
  for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i) {
    const auto& obs = ds.samples[i];
    if (obs.split != Split::kTrain) continue;
    (obs.label ? anomalies : normals)[obs.subject].push_back(i);
  }
  Rng rng(derive_seed(seed, {0xf3054}));
  std::vector<int> out;
  for (int a = 0; a < ws.n_subjects; ++a) {
    int need_normal = shots;
    int need_anom = mode == SupportMode::kBalanced ? shots : 0;
    if (static_cast<int>(normals[a].size()) < need_normal)
      throw WorldError("subject " + std::to_string(a) + " has only " +
                       std::to_string(normals[a].size()) + " normal train samples, " +
                       std::to_string(need_normal) + " requested");
    if (static_cast<int>(anomalies[a].size()) < need_anom)
      throw WorldError("subject " + std::to_string(a) + " has only " +
                       std::to_string(anomalies[a].size()) +
                       " anomalous train samples, " + std::to_string(need_anom) +
                       " requested");
    rng.shuffle(normals[a]);
    rng.shuffle(anomalies[a]);
    out.insert(out.end(), normals[a].begin(), normals[a].begin() + need_normal);
    out.insert(out.end(), anomalies[a].begin(), anomalies[a].begin() + need_anom);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Collision pairs

CollisionPair collision_pair(const World& w, uint64_t seed) {
  Rng rng(derive_seed(seed, {0xc0111de}));
  CollisionPair pair;
  pair.subject = static_cast<int>(rng.below(w.spec.n_subjects));
  auto compatible = w.contexts_with_label(pair.subject, 0);
  auto incompatible = w.contexts_with_label(pair.subject, 1);
  // The balance band guarantees both sides are nonempty.
  pair.ctx_normal = compatible[rng.below(compatible.size())];
  pair.ctx_anomalous = incompatible[rng.below(incompatible.size())];
  uint64_t instance = derive_seed(seed, {0x1457a});
  pair.normal_obs = render(w, pair.subject, pair.ctx_normal, instance);
  pair.anomalous_obs = render(w, pair.subject, pair.ctx_anomalous, instance);
  return pair;
}

// ---------------------------------------------------------------------------
// Export / import

namespace {

json spec_to_json(const WorldSpec& s) {
  return json{{"n_subjects", s.n_subjects},   {"n_contexts", s.n_contexts},
              {"grid_h", s.grid_h},           {"grid_w", s.grid_w},
              {"feat_dim", s.feat_dim},       {"seed", s.seed},
              {"trait_dim", s.trait_dim},     {"trait_amp", s.trait_amp},
              {"motif_amp", s.motif_amp},     {"noise_amp", s.noise_amp},
              {"subject_noise_amp", s.subject_noise_amp},
              {"balance_lo", s.balance_lo},   {"balance_hi", s.balance_hi},
              {"mask_area_lo", s.mask_area_lo}, {"mask_area_hi", s.mask_area_hi}};
}

WorldSpec spec_from_json(const json& j) {
  WorldSpec s;
  s.n_subjects = j.at("n_subjects");
  s.n_contexts = j.at("n_contexts");
  s.grid_h = j.at("grid_h");
  s.grid_w = j.at("grid_w");
  s.feat_dim = j.at("feat_dim");
  s.seed = j.at("seed");
  s.trait_dim = j.at("trait_dim");
  s.trait_amp = j.at("trait_amp");
  s.motif_amp = j.at("motif_amp");
  s.noise_amp = j.at("noise_amp");
  s.subject_noise_amp = j.at("subject_noise_amp");
  s.balance_lo = j.at("balance_lo");
  s.balance_hi = j.at("balance_hi");
  s.mask_area_lo = j.at("mask_area_lo");
  s.mask_area_hi = j.at("mask_area_hi");
  return s;
}

json plan_to_json(const SplitPlan& p) {
  return json{{"train", p.train},
              {"val", p.val},
              {"cross_context", p.cross_context},
              {"jaccard_lo", p.jaccard_lo},
              {"jaccard_hi", p.jaccard_hi},
              {"balance_tol", p.balance_tol},
              {"seed", p.seed}};
}

SplitPlan plan_from_json(const json& j) {
  SplitPlan p;
  p.train = j.at("train");
  p.val = j.at("val");
  p.cross_context = j.at("cross_context");
  p.jaccard_lo = j.at("jaccard_lo");
  p.jaccard_hi = j.at("jaccard_hi");
  p.balance_tol = j.at("balance_tol");
  p.seed = j.at("seed");
  return p;
}

std::string blob_name(int index, char tag) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c_%06d.bin", tag, index);
  return std::string("blobs/") + buf;
}

}  // namespace

uint64_t dataset_content_hash(const Dataset& ds) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& row : ds.world.compat) h = fnv1a(row.data(), row.size(), h);
  for (const auto& obs : ds.samples) {
    h = fnv1a(obs.x.data(), obs.x.size() * sizeof(double), h);
    h = fnv1a(obs.mask.data(), obs.mask.size(), h);
    int32_t meta[4] = {obs.subject, obs.context, obs.label,
                       static_cast<int32_t>(obs.split)};
    h = fnv1a(meta, sizeof(meta), h);
  }
  return h;
}

void export_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "blobs");
  const auto& ws = ds.world.spec;
  json manifest;
  manifest["schema_version"] = 1;
  manifest["kind"] = "dataset";
  manifest["contextual"] = ds.contextual;
  manifest["world"] = spec_to_json(ws);
  manifest["split_plan"] = plan_to_json(ds.plan);
  manifest["compat"] = ds.world.compat;
  manifest["repair_flips"] = ds.world.repair_flips;
  manifest["ss_pool"] = ds.ss_pool;
  manifest["cc_pool"] = ds.cc_pool;

  json samples = json::array();
  for (int i = 0; i < static_cast<int>(ds.samples.size()); ++i) {
    const auto& obs = ds.samples[i];
    std::string xfile = blob_name(i, 'x');
    std::string mfile = blob_name(i, 'm');
    io::atomic_write(dir + "/" + xfile,
                     io::encode_tensor_blob({ws.grid_h, ws.grid_w, ws.feat_dim}, obs.x));
    io::atomic_write(dir + "/" + mfile,
                     io::encode_mask_blob(ws.grid_h, ws.grid_w, obs.mask));
    samples.push_back(json{{"subject", obs.subject},
                           {"context", obs.context},
                           {"label", obs.label},
                           {"instance", obs.instance},
                           {"split", split_name(obs.split)},
                           {"x", xfile},
                           {"mask", mfile}});
  }
  manifest["samples"] = std::move(samples);
  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(dataset_content_hash(ds)));
  manifest["content_hash"] = std::string(hash_hex);
  io::atomic_write(dir + "/manifest.json", manifest.dump(2) + "\n");
}

Dataset import_dataset(const std::string& dir) {
  std::string mf = dir + "/manifest.json";
  if (!io::file_exists(mf))
    throw io::IntegrityError("no manifest.json under '" + dir + "'");
  json manifest = json::parse(io::read_text(mf));
  if (manifest.at("kind") != "dataset")
    throw io::IntegrityError("manifest kind is not 'dataset'");
  if (manifest.at("schema_version") != 1)
    throw io::IntegrityError("unsupported dataset schema_version");

  Dataset ds;
  ds.contextual = manifest.at("contextual");
  WorldSpec spec = spec_from_json(manifest.at("world"));
  ds.world = build_world(spec);
  ds.plan = plan_from_json(manifest.at("split_plan"));
  std::vector<std::vector<uint8_t>> stored_compat =
      manifest.at("compat").get<std::vector<std::vector<uint8_t>>>();
  if (stored_compat != ds.world.compat)
    throw io::IntegrityError(
        "stored compatibility table disagrees with the regenerated world");
  ds.ss_pool = manifest.at("ss_pool").get<std::vector<std::vector<int>>>();
  ds.cc_pool = manifest.at("cc_pool").get<std::vector<std::vector<int>>>();

  for (const auto& rec : manifest.at("samples")) {
    Observation obs;
    obs.subject = rec.at("subject");
    obs.context = rec.at("context");
    obs.label = rec.at("label");
    obs.instance = rec.at("instance");
    obs.split = split_from_name(rec.at("split"));
    std::vector<int> shape;
    io::decode_tensor_blob(io::read_file(dir + "/" + rec.at("x").get<std::string>()),
                           shape, obs.x);
    if (shape != std::vector<int>{spec.grid_h, spec.grid_w, spec.feat_dim})
      throw io::IntegrityError("feature blob shape mismatch");
    int h = 0, w = 0;
    io::decode_mask_blob(io::read_file(dir + "/" + rec.at("mask").get<std::string>()),
                         h, w, obs.mask);
    if (h != spec.grid_h || w != spec.grid_w)
      throw io::IntegrityError("mask blob shape mismatch");
    ds.samples.push_back(std::move(obs));
  }

  char hash_hex[32];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(dataset_content_hash(ds)));
  if (manifest.at("content_hash") != std::string(hash_hex))
    throw io::IntegrityError("dataset content hash mismatch: expected " +
                             manifest.at("content_hash").get<std::string>() +
                             ", recomputed " + hash_hex);
  return ds;
}

}  // namespace ccl::world
