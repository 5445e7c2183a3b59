#include "ccl/textref.hpp"

#include <cmath>

namespace ccl::text {

using diff::Tape;
using diff::Tensor;

void PromptSet::validate() const {
  if (cls.empty()) throw TextRefError("prompt set has no class name");
  if (normal.empty()) throw TextRefError("no normal templates for '" + cls + "'");
  if (anomalous.empty())
    throw TextRefError("no anomalous templates for '" + cls + "'");
  auto check = [&](const std::vector<std::string>& list, const char* state) {
    for (const auto& t : list)
      if (t.find("{cls}") == std::string::npos)
        throw TextRefError(std::string(state) + " template '" + t +
                           "' lacks the {cls} placeholder");
  };
  check(normal, "normal");
  check(anomalous, "anomalous");
  check(formatting, "formatting");
}

PromptSet default_prompt_set(const std::string& cls) {
  PromptSet p;
  p.cls = cls;
  p.normal = {
      "a photo of {cls} in a normal place",
      "a {cls} in a typical environment",
      "a {cls} in a safe context",
      "a usual photo of {cls}",
  };
  p.anomalous = {
      "a {cls} in an unusual place",
      "a {cls} in an abnormal environment",
      "a {cls} in an unsafe context",
      "an unusual photo of {cls}",
  };
  p.formatting = {
      "{cls}.",
      "a photo of {cls}.",
      "an image of {cls}.",
  };
  return p;
}

std::string instantiate(const std::string& tmpl, const std::string& cls) {
  std::string out;
  size_t pos = 0;
  while (pos < tmpl.size()) {
    size_t open = tmpl.find('{', pos);
    if (open == std::string::npos) {
      out.append(tmpl, pos, std::string::npos);
      break;
    }
    out.append(tmpl, pos, open - pos);
    size_t close = tmpl.find('}', open);
    if (close == std::string::npos)
      throw TextRefError("unclosed placeholder in template '" + tmpl + "'");
    std::string key = tmpl.substr(open + 1, close - open - 1);
    if (key != "cls")
      throw TextRefError("unknown placeholder '{" + key + "}' in template '" +
                         tmpl + "'");
    out += cls;
    pos = close + 1;
  }
  return out;
}

namespace {

// Unit-normalized mean of one state's template embeddings.
Tensor state_embedding(Tape& tape, const enc::TextEncoder& enc,
                       const std::vector<std::string>& templates,
                       const std::string& cls, const enc::LayerHook& hook) {
  Tensor acc;
  for (size_t i = 0; i < templates.size(); ++i) {
    Tensor e = enc::encode_text(enc, tape, instantiate(templates[i], cls), hook).pooled;
    acc = i == 0 ? e : diff::add(tape, acc, e);
  }
  acc = diff::scale(tape, 1.0 / static_cast<double>(templates.size()), acc);
  return diff::l2_normalize(tape, acc);
}

}  // namespace

Tensor TextPair::prototype(Tape& tape) const {
  return diff::scale(tape, 0.5, diff::add(tape, t0, t1));
}

TextPair build_text_pair(Tape& tape, const enc::TextEncoder& enc,
                         const PromptSet& prompts, const enc::LayerHook& hook) {
  prompts.validate();
  TextPair pair;
  pair.t0 = state_embedding(tape, enc, prompts.normal, prompts.cls, hook);
  pair.t1 = state_embedding(tape, enc, prompts.anomalous, prompts.cls, hook);
  return pair;
}

// ---------------------------------------------------------------------------
// Losses

Tensor loss_ortho(Tape& tape, const TextPair& pair) {
  Tensor dot = diff::sum(tape, diff::mul(tape, pair.t0, pair.t1));
  return diff::mul(tape, dot, dot);
}

Tensor loss_cons(Tape& tape, const TextPair& pair) {
  Tensor tmu = pair.prototype(tape);
  Tensor d0 = diff::sq_l2_dist(tape, pair.t0, tmu);
  Tensor d1 = diff::sq_l2_dist(tape, pair.t1, tmu);
  return diff::scale(tape, 0.5, diff::add(tape, d0, d1));
}

Tensor loss_ground(Tape& tape, const TextPair& pair, const Tensor& v_cls) {
  Tensor tmu = pair.prototype(tape);
  double n2 = 0.0;
  for (double v : tmu.values()) n2 += v * v;
  if (n2 < 1e-20)
    throw TextRefError("degenerate prototype: the state embeddings cancel");
  Tensor sim = diff::cosine_sim(tape, tmu, v_cls);
  return diff::sub(tape, diff::constant_scalar(1.0), sim);
}

Tensor loss_calib(Tape& tape, const TextPair& pair, const Tensor& v_cls,
                  double margin) {
  Tensor d1 = diff::sum(tape, diff::mul(tape, v_cls, pair.t1));
  Tensor d0 = diff::sum(tape, diff::mul(tape, v_cls, pair.t0));
  Tensor arg = diff::add(tape, diff::sub(tape, diff::constant_scalar(margin), d1), d0);
  return diff::hinge(tape, arg);
}

void TextLossWeights::validate() const {
  for (double v : {ortho, cons, ground, calib})
    if (!(v >= 0.0) || !std::isfinite(v))
      throw TextRefError("loss weights must be finite and nonnegative");
  if (!std::isfinite(margin)) throw TextRefError("margin must be finite");
  if (!(anneal_fraction >= 0.0) || !(anneal_fraction <= 1.0))
    throw TextRefError("anneal_fraction must lie in [0, 1]");
}

double effective_ortho_weight(const TextLossWeights& w, double progress) {
  if (!(progress >= 0.0) || !(progress <= 1.0))
    throw TextRefError("progress must lie in [0, 1]");
  if (w.anneal_fraction <= 0.0) return w.ortho;
  double ramp = progress / w.anneal_fraction;
  return w.ortho * (ramp < 1.0 ? ramp : 1.0);
}

Tensor loss_text_total(Tape& tape, const TextPair& pair, const Tensor& v_cls,
                       const TextLossWeights& w, double progress) {
  w.validate();
  Tensor total = diff::scale(tape, effective_ortho_weight(w, progress),
                             loss_ortho(tape, pair));
  total = diff::add(tape, total, diff::scale(tape, w.cons, loss_cons(tape, pair)));
  total = diff::add(tape, total,
                    diff::scale(tape, w.ground, loss_ground(tape, pair, v_cls)));
  if (w.calib > 0.0)
    total = diff::add(tape, total, diff::scale(tape, w.calib,
                                               loss_calib(tape, pair, v_cls, w.margin)));
  return total;
}

}  // namespace ccl::text
