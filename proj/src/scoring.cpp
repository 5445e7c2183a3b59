#include "ccl/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <queue>

namespace ccl::score {

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double l2_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Margins sim(p_j, t1) - sim(p_j, t0) over the rows of one patch matrix.
// Plain arithmetic: scoring never needs gradients.
std::vector<double> patch_margins(const diff::Tensor& patches,
                                  const text::TextPair& pair) {
  if (patches.shape.size() != 2)
    throw ScoringError("patch matrix must be two-dimensional, got shape " +
                       diff::shape_str(patches.shape));
  int rows = patches.shape[0];
  int d = patches.shape[1];
  const std::vector<double>& p = patches.values();
  const std::vector<double>& t0 = pair.t0.values();
  const std::vector<double>& t1 = pair.t1.values();
  if (static_cast<int>(t0.size()) != d || static_cast<int>(t1.size()) != d)
    throw ScoringError("text embedding width does not match the patch width");

  double n0 = l2_norm(t0), n1 = l2_norm(t1);
  if (n0 == 0.0 || n1 == 0.0)
    throw ScoringError("zero-norm text embedding in pixel scoring");

  std::vector<double> out(rows);
  for (int j = 0; j < rows; ++j) {
    const double* row = p.data() + static_cast<size_t>(j) * d;
    double np = 0.0, d0 = 0.0, d1 = 0.0;
    for (int k = 0; k < d; ++k) {
      np += row[k] * row[k];
      d0 += row[k] * t0[k];
      d1 += row[k] * t1[k];
    }
    np = std::sqrt(np);
    if (np == 0.0) throw ScoringError("zero-norm patch embedding");
    out[j] = d1 / (np * n1) - d0 / (np * n0);
  }
  return out;
}

// Half-pixel-center sampling with edge clamping, so constant grids stay
// constant and each source cell dominates its own footprint.
PixelMap bilinear_upsample(const std::vector<double>& grid, int gh, int gw,
                           int oh, int ow) {
  PixelMap m;
  m.h = oh;
  m.w = ow;
  m.v.resize(static_cast<size_t>(oh) * ow);
  double sy = static_cast<double>(gh) / oh;
  double sx = static_cast<double>(gw) / ow;
  for (int r = 0; r < oh; ++r) {
    double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, gh - 1.0);
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, gh - 1);
    double ty = fy - y0;
    for (int c = 0; c < ow; ++c) {
      double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, gw - 1.0);
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, gw - 1);
      double tx = fx - x0;
      double top = grid[static_cast<size_t>(y0) * gw + x0] * (1.0 - tx) +
                   grid[static_cast<size_t>(y0) * gw + x1] * tx;
      double bot = grid[static_cast<size_t>(y1) * gw + x0] * (1.0 - tx) +
                   grid[static_cast<size_t>(y1) * gw + x1] * tx;
      m.v[static_cast<size_t>(r) * ow + c] = top * (1.0 - ty) + bot * ty;
    }
  }
  return m;
}

void check_score_inputs(const std::vector<double>& scores,
                        const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw ScoringError("got " + std::to_string(scores.size()) + " scores for " +
                       std::to_string(labels.size()) + " labels");
  if (scores.empty()) throw ScoringError("no samples to rank");
  for (int l : labels)
    if (l != 0 && l != 1) throw ScoringError("labels must be 0 or 1");
}

}  // namespace

double score_image(const crm::FusionResult& fusion) {
  const std::vector<double>& l = fusion.fused_logits.values();
  if (l.size() != 2)
    throw ScoringError("fused logits must hold the two similarities");
  return stable_sigmoid(l[1] - l[0]);
}

PixelMap score_pixels(const crm::FusionResult& fusion,
                      const csr::BranchBundle& bundle, const text::TextPair& pair,
                      int out_h, int out_w, int grid_h, int grid_w) {
  if (out_h < 1 || out_w < 1)
    throw ScoringError("output dimensions must be positive");
  if (fusion.active.empty()) throw ScoringError("no active branches to score");

  std::vector<std::vector<double>> margins;
  margins.reserve(fusion.active.size());
  for (csr::Branch b : fusion.active)
    margins.push_back(patch_margins(bundle.patches(b), pair));
  std::vector<double> fused = crm::fuse_patches(fusion, margins);

  int tokens = static_cast<int>(fused.size());
  if (grid_h > 0 || grid_w > 0) {
    if (grid_h < 1 || grid_w < 1 || grid_h * grid_w != tokens)
      throw ScoringError("token grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " does not hold " +
                         std::to_string(tokens) + " patches");
  } else {
    int side = static_cast<int>(std::lround(std::sqrt(tokens)));
    if (side * side != tokens)
      throw ScoringError(std::to_string(tokens) +
                         " patch tokens do not form a square grid; pass the "
                         "grid shape explicitly");
    grid_h = grid_w = side;
  }
  return bilinear_upsample(fused, grid_h, grid_w, out_h, out_w);
}

// ---------------------------------------------------------------------------
// Metrics

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_score_inputs(scores, labels);
  int64_t n_pos = std::count(labels.begin(), labels.end(), 1);
  int64_t n_neg = static_cast<int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ScoringError("AUROC needs both classes in the split");

  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return scores[a] < scores[b]; });

  // Rank-sum form of the Mann-Whitney statistic; tie groups share their
  // average rank, which is the half-credit convention.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
    i = j;
  }
  double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double aupr(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_score_inputs(scores, labels);
  int64_t n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0) throw ScoringError("AUPR needs at least one positive");

  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int a, int b) { return scores[a] > scores[b]; });

  double area = 0.0, prev_recall = 0.0;
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < idx.size()) {
    size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    for (size_t k = i; k < j; ++k) (labels[idx[k]] == 1 ? tp : fp) += 1;
    double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

double pro(const std::vector<PixelMap>& maps,
           const std::vector<std::vector<uint8_t>>& masks, double fpr_cap) {
  if (maps.size() != masks.size())
    throw ScoringError("got " + std::to_string(maps.size()) + " maps for " +
                       std::to_string(masks.size()) + " masks");
  if (maps.empty()) throw ScoringError("no pixel maps to integrate");
  if (!(fpr_cap > 0.0) || fpr_cap > 1.0)
    throw ScoringError("fpr_cap must lie in (0, 1]");

  // Label 4-connected components across all masks; every pixel gets either a
  // global component id or -1 (background / normal image).
  struct Px {
    double value;
    int comp;
  };
  std::vector<Px> px;
  std::vector<int64_t> comp_size;
  int64_t n_neg = 0;

  for (size_t im = 0; im < maps.size(); ++im) {
    const PixelMap& m = maps[im];
    const std::vector<uint8_t>& mask = masks[im];
    if (m.h < 1 || m.w < 1 ||
        m.v.size() != static_cast<size_t>(m.h) * m.w)
      throw ScoringError("pixel map " + std::to_string(im) + " is malformed");
    if (mask.size() != m.v.size())
      throw ScoringError("mask " + std::to_string(im) +
                         " does not match its map's dimensions");

    std::vector<int> comp(mask.size(), -1);
    for (size_t s = 0; s < mask.size(); ++s) {
      if (!mask[s] || comp[s] != -1) continue;
      int id = static_cast<int>(comp_size.size());
      comp_size.push_back(0);
      std::queue<int> q;
      q.push(static_cast<int>(s));
      comp[s] = id;
      while (!q.empty()) {
        int cur = q.front();
        q.pop();
        ++comp_size[id];
        int r = cur / m.w, c = cur % m.w;
        const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int rr = r + dr[k], cc = c + dc[k];
          if (rr < 0 || rr >= m.h || cc < 0 || cc >= m.w) continue;
          int nxt = rr * m.w + cc;
          if (mask[nxt] && comp[nxt] == -1) {
            comp[nxt] = id;
            q.push(nxt);
          }
        }
      }
    }
    for (size_t s = 0; s < mask.size(); ++s) {
      px.push_back({m.v[s], comp[s]});
      if (comp[s] == -1) ++n_neg;
    }
  }

  if (comp_size.empty())
    throw ScoringError("no anomalous pixels in the split; PRO undefined");
  if (n_neg == 0)
    throw ScoringError("masks cover every pixel; false-positive rate undefined");

  std::sort(px.begin(), px.end(),
            [](const Px& a, const Px& b) { return a.value > b.value; });

  // Sweep strict thresholds at the distinct values, descending. Right before
  // a value group switches on, the active set is exactly {value > t}.
  std::vector<std::pair<double, double>> curve;  // (fpr, mean overlap)
  double overlap_sum = 0.0;
  int64_t fp_on = 0;
  double n_comp = static_cast<double>(comp_size.size());
  size_t i = 0;
  while (i < px.size()) {
    curve.emplace_back(static_cast<double>(fp_on) / n_neg,
                       overlap_sum / n_comp);
    size_t j = i;
    while (j < px.size() && px[j].value == px[i].value) {
      if (px[j].comp == -1)
        ++fp_on;
      else
        overlap_sum += 1.0 / static_cast<double>(comp_size[px[j].comp]);
      ++j;
    }
    i = j;
  }
  // Past the smallest realized threshold the curve is not observed; extend
  // flat so an uninformative constant map integrates to zero instead of an
  // interpolation artifact.
  curve.emplace_back(1.0, curve.back().second);

  double area = 0.0;
  for (size_t k = 0; k + 1 < curve.size(); ++k) {
    auto [f0, o0] = curve[k];
    auto [f1, o1] = curve[k + 1];
    if (f0 >= fpr_cap) break;
    double fc = std::min(f1, fpr_cap);
    if (fc <= f0) continue;
    double oc = o0 + (o1 - o0) * (fc - f0) / (f1 - f0);
    area += 0.5 * (o0 + oc) * (fc - f0);
  }
  return area / fpr_cap;
}

// ---------------------------------------------------------------------------
// Evaluation

const char* protocol_name(Protocol p) {
  switch (p) {
    case Protocol::kFewshotCc: return "fewshot_cc";
    case Protocol::kNormalOnlyCc: return "normal_only_cc";
    case Protocol::kInDistribution: return "in_distribution";
  }
  throw ScoringError("unknown protocol");
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "fewshot_cc") return Protocol::kFewshotCc;
  if (name == "normal_only_cc") return Protocol::kNormalOnlyCc;
  if (name == "in_distribution") return Protocol::kInDistribution;
  throw ScoringError("unknown protocol '" + name + "'");
}

namespace {

struct PixelBatch {
  std::vector<PixelMap> maps;
  std::vector<std::vector<uint8_t>> gts;
  std::vector<double> flat_scores;
  std::vector<int> flat_labels;
};

void accumulate_pixels(PixelBatch& pb, PixelMap map, const world::Observation& obs) {
  // Anomalous samples localize on the subject; normal samples have no
  // anomalous pixels by convention.
  std::vector<uint8_t> gt(map.v.size(), 0);
  if (obs.label == 1)
    gt.assign(obs.mask.begin(), obs.mask.end());
  for (size_t i = 0; i < map.v.size(); ++i) {
    pb.flat_scores.push_back(map.v[i]);
    pb.flat_labels.push_back(gt[i] ? 1 : 0);
  }
  pb.maps.push_back(std::move(map));
  pb.gts.push_back(std::move(gt));
}

bool both_labels(const std::vector<int>& labels) {
  bool saw0 = false, saw1 = false;
  for (int l : labels) (l == 1 ? saw1 : saw0) = true;
  return saw0 && saw1;
}

std::string fmt_metric(double v, bool valid) {
  char buf[32];
  if (valid)
    std::snprintf(buf, sizeof(buf), "%8.4f", v);
  else
    std::snprintf(buf, sizeof(buf), "%8s", "n/a");
  return buf;
}

}  // namespace

MetricResult evaluate(model::Model& m, const world::Dataset& ds,
                      world::Split split, const EvalOptions& opt) {
  std::vector<int> idx = ds.indices(split);
  if (idx.empty())
    throw ScoringError(std::string("split '") + world::split_name(split) +
                       "' has no samples");
  if (!(opt.fpr_cap > 0.0) || opt.fpr_cap > 1.0)
    throw ScoringError("fpr_cap must lie in (0, 1]");

  const world::WorldSpec& ws = ds.world.spec;
  int n_branches = static_cast<int>(m.cfg.active.size());

  MetricResult out;
  out.split = split;
  out.branches = m.cfg.active;

  std::vector<text::TextPair> pairs;
  if (!opt.oracle) pairs = model::frozen_class_pairs(m);

  std::vector<double> scores;
  std::vector<int> labels;
  PixelBatch pixels;
  scores.reserve(idx.size());
  labels.reserve(idx.size());

  for (int i : idx) {
    const world::Observation& obs = ds.samples[static_cast<size_t>(i)];
    SampleRecord rec;
    rec.index = i;
    rec.subject = obs.subject;
    rec.context = obs.context;
    rec.label = obs.label;

    if (opt.oracle) {
      // The generator's own rule: maximal score iff the pairing is
      // incompatible, the subject mask as a perfect localization.
      rec.score = ds.world.compat[obs.subject][obs.context] ? 0.0 : 1.0;
      rec.alpha.assign(n_branches, 1.0 / n_branches);
      if (opt.pixel_metrics) {
        PixelMap pm;
        pm.h = ws.grid_h;
        pm.w = ws.grid_w;
        pm.v.reserve(obs.mask.size());
        for (uint8_t b : obs.mask) pm.v.push_back(obs.label == 1 && b ? 1.0 : 0.0);
        accumulate_pixels(pixels, std::move(pm), obs);
      }
    } else {
      diff::Tape tape;
      diff::NoGradGuard ng(tape);
      csr::RefineOptions ropt;
      ropt.use_masks = opt.use_masks;
      ropt.frozen = true;
      csr::BranchBundle bundle = model::refine(tape, m, obs, ropt);
      const text::TextPair& pair = pairs.at(static_cast<size_t>(obs.subject));
      crm::FusionResult fusion = obj::fuse_any(tape, m, bundle, pair, true);
      rec.score = score_image(fusion);
      rec.alpha = fusion.alpha.values();
      if (opt.pixel_metrics)
        accumulate_pixels(pixels,
                          score_pixels(fusion, bundle, pair, ws.grid_h, ws.grid_w,
                                       m.visual.cfg.patches_h(),
                                       m.visual.cfg.patches_w()),
                          obs);
    }

    scores.push_back(rec.score);
    labels.push_back(rec.label);
    out.samples.push_back(std::move(rec));
  }

  out.n = static_cast<int>(scores.size());
  out.n_anom = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
  out.i_auroc = auroc(scores, labels);
  out.i_aupr = aupr(scores, labels);

  out.alpha_mean.assign(n_branches, 0.0);
  for (const SampleRecord& r : out.samples)
    for (int b = 0; b < n_branches; ++b) out.alpha_mean[b] += r.alpha[b];
  for (double& a : out.alpha_mean) a /= out.n;

  if (opt.pixel_metrics && both_labels(pixels.flat_labels)) {
    out.p_auroc = auroc(pixels.flat_scores, pixels.flat_labels);
    out.pro = pro(pixels.maps, pixels.gts, opt.fpr_cap);
    out.pixel_valid = true;
  }

  // Per-class rows in subject order; positions of each class's samples in
  // the flat arrays line up with out.samples.
  for (int cls = 0; cls < ds.n_classes(); ++cls) {
    ClassRow row;
    row.subject = cls;
    std::vector<double> cs;
    std::vector<int> cl;
    std::vector<PixelMap> cmaps;
    std::vector<std::vector<uint8_t>> cgts;
    std::vector<double> cps;
    std::vector<int> cpl;
    row.alpha_mean.assign(n_branches, 0.0);
    for (size_t k = 0; k < out.samples.size(); ++k) {
      const SampleRecord& r = out.samples[k];
      if (r.subject != cls) continue;
      cs.push_back(r.score);
      cl.push_back(r.label);
      for (int b = 0; b < n_branches; ++b) row.alpha_mean[b] += r.alpha[b];
      if (opt.pixel_metrics) {
        cmaps.push_back(pixels.maps[k]);
        cgts.push_back(pixels.gts[k]);
        for (size_t s = 0; s < pixels.maps[k].v.size(); ++s) {
          cps.push_back(pixels.maps[k].v[s]);
          cpl.push_back(pixels.gts[k][s] ? 1 : 0);
        }
      }
    }
    if (cs.empty()) continue;  // class absent from this split
    row.n = static_cast<int>(cs.size());
    row.n_anom = static_cast<int>(std::count(cl.begin(), cl.end(), 1));
    for (double& a : row.alpha_mean) a /= row.n;
    if (row.n_anom > 0 && row.n_anom < row.n) {
      row.image_valid = true;
      row.i_auroc = auroc(cs, cl);
      row.i_aupr = aupr(cs, cl);
    }
    if (opt.pixel_metrics && both_labels(cpl)) {
      row.pixel_valid = true;
      row.p_auroc = auroc(cps, cpl);
      row.pro = pro(cmaps, cgts, opt.fpr_cap);
    }
    out.per_class.push_back(std::move(row));
  }
  return out;
}

MetricResult run_protocol(Protocol kind, model::Model& m,
                          const world::Dataset& ds, const obj::TrainPlan& plan,
                          const EvalOptions& opt) {
  obj::TrainPlan p = plan;
  world::Split split = world::Split::kCrossContext;
  switch (kind) {
    case Protocol::kFewshotCc:
      p.support = world::SupportMode::kBalanced;
      break;
    case Protocol::kNormalOnlyCc:
      p.support = world::SupportMode::kNormalOnly;
      break;
    case Protocol::kInDistribution:
      p.support = world::SupportMode::kBalanced;
      split = world::Split::kVal;
      break;
  }
  obj::train(m, ds, p);
  return evaluate(m, ds, split, opt);
}

std::string format_report(const MetricResult& r) {
  std::string s;
  char line[256];
  std::snprintf(line, sizeof(line),
                "split %s: %d images (%d anomalous)  I-AUROC %.4f  I-AUPR %.4f",
                world::split_name(r.split), r.n, r.n_anom, r.i_auroc, r.i_aupr);
  s += line;
  if (r.pixel_valid) {
    std::snprintf(line, sizeof(line), "  P-AUROC %.4f  PRO %.4f", r.p_auroc,
                  r.pro);
    s += line;
  }
  s += "\n";

  std::string alpha_hdr = "alpha[";
  for (size_t b = 0; b < r.branches.size(); ++b) {
    if (b) alpha_hdr += ",";
    alpha_hdr += csr::branch_name(r.branches[b])[0];
  }
  alpha_hdr += "]";
  std::snprintf(line, sizeof(line), "%5s %5s %5s %8s %8s %8s %8s  %s\n", "class",
                "n", "anom", "I-AUROC", "I-AUPR", "P-AUROC", "PRO",
                alpha_hdr.c_str());
  s += line;
  for (const ClassRow& row : r.per_class) {
    std::snprintf(line, sizeof(line), "%5d %5d %5d %s %s %s %s ", row.subject,
                  row.n, row.n_anom,
                  fmt_metric(row.i_auroc, row.image_valid).c_str(),
                  fmt_metric(row.i_aupr, row.image_valid).c_str(),
                  fmt_metric(row.p_auroc, row.pixel_valid).c_str(),
                  fmt_metric(row.pro, row.pixel_valid).c_str());
    s += line;
    for (double a : row.alpha_mean) {
      std::snprintf(line, sizeof(line), " %.3f", a);
      s += line;
    }
    s += "\n";
  }
  return s;
}

}  // namespace ccl::score
