#pragma once

// Frozen toy encoders. The visual side is a small residual token mixer over
// patch embeddings with a cls token; the text side embeds hashed word ids and
// mixes them through mean-pooled residual layers. Weights are seeded
// constants: they never receive gradients, and their content hash is part of
// the training contract.

#include <functional>
#include <string>
#include <vector>

#include "ccl/diff.hpp"
#include "ccl/worldgen.hpp"

namespace ccl::enc {

struct EncoderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Called after each encoder layer with the token matrix; returns the
// (possibly adapted) tokens. Layer index is 0-based.
using LayerHook =
    std::function<diff::Tensor(diff::Tape&, const diff::Tensor&, int)>;

// ---------------------------------------------------------------------------
// Visual

struct VisualConfig {
  int grid_h = 16, grid_w = 16, feat_dim = 8;
  int patch = 4;
  int layers = 4;  // residual mixer depth
  int width = 32;  // token embedding dim
  uint64_t seed = 2024;

  void validate() const;
  int patches_h() const { return grid_h / patch; }
  int patches_w() const { return grid_w / patch; }
  int tokens() const { return 1 + patches_h() * patches_w(); }  // cls + patches
  int patch_dim() const { return patch * patch * feat_dim; }
};

struct VisualEncoder {
  VisualConfig cfg;
  std::vector<double> patch_proj;  // [patch_dim x width]
  std::vector<double> cls_token;   // [width]
  std::vector<double> pos;         // [tokens x width], sinusoidal
  struct Layer {
    std::vector<double> mix;  // [tokens x tokens]
    std::vector<double> w;    // [width x width]
    std::vector<double> b;    // [width]
  };
  std::vector<Layer> layers;

  uint64_t weight_hash() const;
};

VisualEncoder make_visual_encoder(const VisualConfig& cfg);

struct VisualOut {
  diff::Tensor cls;                      // [1 x width]
  diff::Tensor patches;                  // [tokens-1 x width]
  std::vector<diff::Tensor> per_layer;   // tokens after each layer (post-hook)
};

// Encodes one view grid (cell-major, channel fastest). The hook, when set,
// rewrites the token matrix after every layer.
VisualOut encode_view(const VisualEncoder& enc, diff::Tape& tape,
                      const std::vector<double>& view, const LayerHook& hook = {});

// ---------------------------------------------------------------------------
// Views

struct ViewTriple {
  std::vector<double> subject;  // mask . x
  std::vector<double> context;  // (1 - mask) . x
  std::vector<double> global;   // x
};

// Splits an observation into subject/context/global views. Requires a mask
// with at least one foreground and one background cell.
ViewTriple make_views(const world::WorldSpec& spec, const world::Observation& obs);

// ---------------------------------------------------------------------------
// Text

struct TextConfig {
  int vocab = 4096;
  int layers = 3;
  int width = 32;
  uint64_t seed = 4077;

  void validate() const;
};

struct TextEncoder {
  TextConfig cfg;
  std::vector<double> embed;  // [vocab x width]
  struct Layer {
    std::vector<double> w;  // [width x width] per-token path
    std::vector<double> u;  // [width x width] pooled path (token mixing)
    std::vector<double> b;  // [width]
  };
  std::vector<Layer> layers;

  uint64_t weight_hash() const;
};

TextEncoder make_text_encoder(const TextConfig& cfg);

// Lowercases, splits on non-alphanumerics, hashes each word into the vocab.
std::vector<int> tokenize(const TextConfig& cfg, const std::string& text);

struct TextOut {
  diff::Tensor pooled;  // [1 x width], unit norm
  std::vector<diff::Tensor> per_layer;
};

TextOut encode_text(const TextEncoder& enc, diff::Tape& tape,
                    const std::string& text, const LayerHook& hook = {});

}  // namespace ccl::enc
