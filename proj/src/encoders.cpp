#include "ccl/encoders.hpp"

#include <cctype>
#include <cmath>

#include "ccl/rng.hpp"

namespace ccl::enc {

using diff::Tape;
using diff::Tensor;

namespace {

std::vector<double> gaussian(Rng& rng, size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

// Sinusoidal position table, [count x width].
std::vector<double> position_table(int count, int width) {
  std::vector<double> pos(static_cast<size_t>(count) * width);
  for (int t = 0; t < count; ++t)
    for (int d = 0; d < width; ++d) {
      double exponent = static_cast<double>(d - (d % 2)) / width;
      double freq = std::pow(10000.0, exponent);
      double arg = static_cast<double>(t) / freq;
      pos[static_cast<size_t>(t) * width + d] =
          (d % 2 == 0) ? std::sin(arg) : std::cos(arg);
    }
  return pos;
}

uint64_t hash_doubles(uint64_t h, const std::vector<double>& v) {
  return fnv1a(v.data(), v.size() * sizeof(double), h);
}

}  // namespace

// ---------------------------------------------------------------------------
// Visual

void VisualConfig::validate() const {
  if (grid_h < 2 || grid_w < 2 || feat_dim < 1)
    throw EncoderError("visual grid configuration is degenerate");
  if (patch < 1 || grid_h % patch != 0 || grid_w % patch != 0)
    throw EncoderError("patch size must divide both grid dimensions");
  if (layers < 1 || width < 4) throw EncoderError("encoder too small");
}

VisualEncoder make_visual_encoder(const VisualConfig& cfg) {
  cfg.validate();
  VisualEncoder enc;
  enc.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, {0x715e0c}));
  int n = cfg.tokens(), d = cfg.width, pd = cfg.patch_dim();
  enc.patch_proj = gaussian(rng, static_cast<size_t>(pd) * d, 1.0 / std::sqrt(pd));
  enc.cls_token = gaussian(rng, d, 1.0);
  enc.pos = position_table(n, d);
  enc.layers.resize(cfg.layers);
  for (auto& layer : enc.layers) {
    layer.mix = gaussian(rng, static_cast<size_t>(n) * n, 1.0 / std::sqrt(n));
    layer.w = gaussian(rng, static_cast<size_t>(d) * d, 1.0 / std::sqrt(d));
    layer.b = gaussian(rng, d, 0.1);
  }
  return enc;
}

uint64_t VisualEncoder::weight_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  h = hash_doubles(h, patch_proj);
  h = hash_doubles(h, cls_token);
  h = hash_doubles(h, pos);
  for (const auto& layer : layers) {
    h = hash_doubles(h, layer.mix);
    h = hash_doubles(h, layer.w);
    h = hash_doubles(h, layer.b);
  }
  return h;
}

VisualOut encode_view(const VisualEncoder& enc, Tape& tape,
                      const std::vector<double>& view, const LayerHook& hook) {
  const auto& cfg = enc.cfg;
  size_t want = static_cast<size_t>(cfg.grid_h) * cfg.grid_w * cfg.feat_dim;
  if (view.size() != want)
    throw EncoderError("view has " + std::to_string(view.size()) +
                       " values, expected " + std::to_string(want));

  int n = cfg.tokens(), d = cfg.width, pd = cfg.patch_dim();
  int ph = cfg.patches_h(), pw = cfg.patches_w();

  // Patchify: one row per patch, cells row-major inside the patch.
  std::vector<double> flat(static_cast<size_t>(ph) * pw * pd);
  for (int py = 0; py < ph; ++py)
    for (int px = 0; px < pw; ++px) {
      double* row = &flat[(static_cast<size_t>(py) * pw + px) * pd];
      int k = 0;
      for (int y = 0; y < cfg.patch; ++y)
        for (int x = 0; x < cfg.patch; ++x) {
          int cell = (py * cfg.patch + y) * cfg.grid_w + (px * cfg.patch + x);
          for (int ch = 0; ch < cfg.feat_dim; ++ch)
            row[k++] = view[static_cast<size_t>(cell) * cfg.feat_dim + ch];
        }
    }

  // All-constant preamble: none of this is recorded on the tape.
  Tensor patches0 = diff::matmul(tape, diff::constant({ph * pw, pd}, std::move(flat)),
                                 diff::constant({pd, d}, enc.patch_proj));
  Tensor cls_row = diff::constant({1, d}, enc.cls_token);
  Tensor tokens = diff::concat_rows(tape, {cls_row, patches0});
  tokens = diff::add(tape, tokens, diff::constant({n, d}, enc.pos));

  VisualOut out;
  for (int i = 0; i < cfg.layers; ++i) {
    const auto& layer = enc.layers[i];
    Tensor mixed = diff::matmul(tape, diff::constant({n, n}, layer.mix), tokens);
    mixed = diff::matmul(tape, mixed, diff::constant({d, d}, layer.w));
    mixed = diff::add_row(tape, mixed, diff::constant({d}, layer.b));
    tokens = diff::add(tape, tokens, diff::tanh_op(tape, mixed));
    if (hook) tokens = hook(tape, tokens, i);
    out.per_layer.push_back(tokens);
  }
  out.cls = diff::slice_rows(tape, tokens, 0, 1);
  out.patches = diff::slice_rows(tape, tokens, 1, n);
  return out;
}

// ---------------------------------------------------------------------------
// Views

ViewTriple make_views(const world::WorldSpec& spec, const world::Observation& obs) {
  size_t cells = static_cast<size_t>(spec.grid_h) * spec.grid_w;
  if (obs.mask.size() != cells)
    throw EncoderError("mask size does not match the grid");
  if (obs.x.size() != cells * spec.feat_dim)
    throw EncoderError("observation size does not match the grid");
  size_t fg = 0;
  for (uint8_t m : obs.mask) fg += m ? 1 : 0;
  if (fg == 0) throw EncoderError("mask has no foreground; views undefined");
  if (fg == cells) throw EncoderError("mask has no background; views undefined");

  ViewTriple v;
  v.global = obs.x;
  v.subject.assign(obs.x.size(), 0.0);
  v.context.assign(obs.x.size(), 0.0);
  for (size_t cell = 0; cell < cells; ++cell) {
    auto* dst = obs.mask[cell] ? &v.subject : &v.context;
    for (int ch = 0; ch < spec.feat_dim; ++ch)
      (*dst)[cell * spec.feat_dim + ch] = obs.x[cell * spec.feat_dim + ch];
  }
  return v;
}

// ---------------------------------------------------------------------------
// Text

void TextConfig::validate() const {
  if (vocab < 16) throw EncoderError("vocab too small");
  if (layers < 1 || width < 4) throw EncoderError("encoder too small");
}

TextEncoder make_text_encoder(const TextConfig& cfg) {
  cfg.validate();
  TextEncoder enc;
  enc.cfg = cfg;
  Rng rng(derive_seed(cfg.seed, {0x7e47}));
  int d = cfg.width;
  enc.embed = gaussian(rng, static_cast<size_t>(cfg.vocab) * d, 1.0);
  enc.layers.resize(cfg.layers);
  for (auto& layer : enc.layers) {
    layer.w = gaussian(rng, static_cast<size_t>(d) * d, 1.0 / std::sqrt(d));
    layer.u = gaussian(rng, static_cast<size_t>(d) * d, 1.0 / std::sqrt(d));
    layer.b = gaussian(rng, d, 0.1);
  }
  return enc;
}

uint64_t TextEncoder::weight_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  h = hash_doubles(h, embed);
  for (const auto& layer : layers) {
    h = hash_doubles(h, layer.w);
    h = hash_doubles(h, layer.u);
    h = hash_doubles(h, layer.b);
  }
  return h;
}

std::vector<int> tokenize(const TextConfig& cfg, const std::string& text) {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    uint64_t h = fnv1a(word.data(), word.size());
    ids.push_back(static_cast<int>(h % static_cast<uint64_t>(cfg.vocab)));
    word.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    else
      flush();
  }
  flush();
  if (ids.empty()) throw EncoderError("text '" + text + "' tokenizes to nothing");
  return ids;
}

TextOut encode_text(const TextEncoder& enc, Tape& tape, const std::string& text,
                    const LayerHook& hook) {
  const auto& cfg = enc.cfg;
  std::vector<int> ids = tokenize(cfg, text);
  int m = static_cast<int>(ids.size()), d = cfg.width;

  std::vector<double> rows(static_cast<size_t>(m) * d);
  for (int t = 0; t < m; ++t)
    for (int k = 0; k < d; ++k)
      rows[static_cast<size_t>(t) * d + k] =
          enc.embed[static_cast<size_t>(ids[t]) * d + k];
  Tensor tokens = diff::constant({m, d}, std::move(rows));
  tokens = diff::add(tape, tokens, diff::constant({m, d}, position_table(m, d)));

  Tensor pool_row = diff::constant({1, m}, std::vector<double>(m, 1.0 / m));

  TextOut out;
  for (int i = 0; i < cfg.layers; ++i) {
    const auto& layer = enc.layers[i];
    // Per-token path plus a mean-pooled path so information crosses tokens.
    Tensor per_tok = diff::matmul(tape, tokens, diff::constant({d, d}, layer.w));
    Tensor pooled = diff::matmul(tape, diff::matmul(tape, pool_row, tokens),
                                 diff::constant({d, d}, layer.u));
    Tensor mixed = diff::add_row(tape, per_tok, pooled);
    mixed = diff::add_row(tape, mixed, diff::constant({d}, layer.b));
    tokens = diff::add(tape, tokens, diff::tanh_op(tape, mixed));
    if (hook) tokens = hook(tape, tokens, i);
    out.per_layer.push_back(tokens);
  }
  out.pooled = diff::l2_normalize(tape, diff::matmul(tape, pool_row, tokens));
  return out;
}

}  // namespace ccl::enc
