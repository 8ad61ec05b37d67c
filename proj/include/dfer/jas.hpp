#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfer/transformer.hpp"

namespace dfer {

enum class Modality { text, video, joint };

enum class TowerInit {
  zero_residual,  // every block starts as the identity map
  random,         // ordinary random init (scratch baselines, tests)
};

inline const char* modality_group_name(Modality m) {
  switch (m) {
    case Modality::text: return "de_text";
    case Modality::video: return "de_video";
    case Modality::joint: return "jas";
  }
  return "de";
}

// Readout weights for pooling tower outputs: a fixed linear ramp over row
// index centered near zero, kMean - kRamp/2 at the first row up to
// kMean + kRamp/2 at the last. Two failure modes shape this choice. A flat
// mean readout is invariant to row order, so sequence direction is visible
// only through attention side-effects, far too weak to bootstrap at small
// scale. A flat mean also passes the large common component that all pooled
// features share, which compresses every cosine similarity into a band of a
// few percent and buries the class signal. Centering the weights (small
// kMean relative to kRamp) cancels that common component by construction:
// the readout primarily measures how the sequence moves through feature
// space, with a small admixture of its static content.
inline constexpr double kReadoutRamp = 2.0;
inline constexpr double kReadoutMeanWeight = 0.25;

// Unnormalized readout weight for row t of an L-row sequence.
inline double readout_weight(std::int64_t t, std::int64_t L) {
  const double frac = L > 1 ? static_cast<double>(t) / static_cast<double>(L - 1) : 0.5;
  return kReadoutMeanWeight + kReadoutRamp * (frac - 0.5);
}

// Trainable temporal/sequence alignment tower. Consumes an ordered feature
// sequence [L, D], adds sinusoidal positions, runs its transformer stack,
// and pools the output rows into a single feature with a fixed position ramp
// (see kReadoutRamp), which is what makes the readout order aware.
//
// The tower can deepen during training: grow_layers appends zero-residual
// blocks, so the represented function is unchanged at the growth step and
// the new capacity fades in through gradient updates.
//
// The joint flavor is shared across modalities and disambiguates inputs
// with an additive per-modality embedding (zero-initialized so fusion is
// also function-preserving).
template <class Real>
struct DynamicEncoder {
  Modality modality = Modality::text;
  std::int64_t embd = 0;
  int heads = 1;
  bool use_positions = true;
  std::vector<TransformerLayer<Real>> blocks;
  Var<Real> mod_text, mod_video;  // joint flavor only
  // Output head: LayerNorm over the pooled vector, then a trainable linear
  // projection (identity at init) and offset (zero at init). The LayerNorm is
  // load-bearing for the cosine-similarity objective downstream: without it,
  // a confidently-wrong batch takes large steps orthogonal to the feature
  // (the cosine Jacobian projects out the radial part), which inflates the
  // feature norm step over step until the 1/|v| factor silences direction
  // learning entirely -- the classic norm-inflation collapse. Normalizing the
  // pooled vector pins its scale, so direction gradients stay alive for as
  // long as training runs. The projection gives training a direct linear
  // path for rotating this tower's output geometry onto whatever
  // constellation the opposite modality is frozen at; the offset lets it
  // shift the constellation off any shared common component.
  Var<Real> ln_g, ln_b;
  Var<Real> out_w, out_b;
  ParamGroup<Real> params;

  static DynamicEncoder fresh(Modality m, std::int64_t embd, int heads, int layers,
                              TowerInit init, std::uint64_t seed) {
    if (embd <= 0 || layers < 1) throw ConfigError("dynamic encoder: bad geometry");
    DynamicEncoder de;
    de.modality = m;
    de.embd = embd;
    de.heads = heads;
    de.params.name = modality_group_name(m);
    Rng rng = Rng(seed).split(de.params.name).split("init");
    for (int i = 0; i < layers; ++i)
      de.blocks.push_back(init == TowerInit::zero_residual
                              ? TransformerLayer<Real>::zero_residual(embd, heads, tower_weight_scale(embd), rng)
                              : TransformerLayer<Real>::random(embd, heads, tower_weight_scale(embd), rng));
    if (m == Modality::joint) {
      de.mod_text = Var<Real>::leaf(Tensor<Real>::zeros(Shape{embd}), false);
      de.mod_video = Var<Real>::leaf(Tensor<Real>::zeros(Shape{embd}), false);
    }
    Tensor<Real> ones(Shape{embd});
    for (Real& v : ones.data) v = Real(1);
    de.ln_g = Var<Real>::leaf(std::move(ones), false);
    de.ln_b = Var<Real>::leaf(Tensor<Real>::zeros(Shape{embd}), false);
    Tensor<Real> eye(Shape{embd, embd});
    for (std::int64_t i = 0; i < embd; ++i) eye.at(i, i) = Real(1);
    de.out_w = Var<Real>::leaf(std::move(eye), false);
    de.out_b = Var<Real>::leaf(Tensor<Real>::zeros(Shape{embd}), false);
    de.rebuild_registration();
    return de;
  }

  // (Re)register every parameter in canonical order: blocks by index, then
  // modality embeddings, then the output head. Growth appends blocks after
  // the head was registered, so without a rebuild a grown tower would hold
  // the same parameters in a different order than a fresh tower of equal
  // depth -- and anything that walks the group (serialization, digests)
  // would disagree across a save/load cycle.
  void rebuild_registration() {
    params.params.clear();
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(params, "layer" + std::to_string(i) + "/");
    if (modality == Modality::joint) {
      params.add("mod_text", mod_text);
      params.add("mod_video", mod_video);
    }
    params.add("ln_g", ln_g);
    params.add("ln_b", ln_b);
    params.add("out_w", out_w);
    params.add("out_b", out_b);
  }

  Var<Real> encode(const Var<Real>& seq, Modality tag) const {
    if (seq.value().rank() != 2 || seq.shape()[1] != embd)
      throw ShapeError("dyn_encode: expected [L," + std::to_string(embd) + "], got " +
                       shape_str(seq.shape()));
    if (seq.shape()[0] < 1) throw ShapeError("dyn_encode: empty sequence");
    if (modality == Modality::joint) {
      if (tag == Modality::joint)
        throw ConfigError("dyn_encode: joint tower needs a text or video tag");
    } else if (tag != modality) {
      throw ConfigError("dyn_encode: tower is single-modality; tag does not match");
    }
    // Normalize each input row (plain LayerNorm, unit gain) before adding the
    // positional code. Upstream features arrive at arbitrary magnitudes; without
    // this the fixed-amplitude positions can drown the content (or vice versa),
    // and order-dependent structure becomes invisible to the blocks.
    Tensor<Real> unit_gain(Shape{embd});
    for (Real& v : unit_gain.data) v = Real(1);
    Var<Real> x = layer_norm(seq, Var<Real>::constant(std::move(unit_gain)),
                             Var<Real>::constant(Tensor<Real>::zeros(Shape{embd})));
    if (use_positions)
      x = add(x, Var<Real>::constant(sinusoidal_positions<Real>(seq.shape()[0], embd)));
    if (modality == Modality::joint)
      x = add_rowwise(x, tag == Modality::text ? mod_text : mod_video);
    for (const auto& b : blocks) x = b.forward(x);
    const std::int64_t L = x.shape()[0];
    Tensor<Real> w(Shape{1, L});
    double wabs = 0;
    for (std::int64_t t = 0; t < L; ++t) {
      const double wt = readout_weight(t, L);
      w.at(0, t) = static_cast<Real>(wt);
      wabs += std::abs(wt);
    }
    Var<Real> pooled = scale(matmul(Var<Real>::constant(std::move(w)), x), 1.0 / wabs);
    if (use_positions) {
      // The positional code is the same additive constant for every input, so
      // its readout is a fixed vector an order of magnitude larger than the
      // per-class signal. Left in place it dominates every pooled feature with
      // one shared direction, and the first epochs burn on that common
      // component instead of the content. The readout is linear, so the
      // scaffold's exact contribution can be subtracted up front.
      const Tensor<Real> pos = sinusoidal_positions<Real>(L, embd);
      Tensor<Real> pos_readout(Shape{1, embd});
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t d = 0; d < embd; ++d)
          pos_readout.at(0, d) -= static_cast<Real>(readout_weight(t, L) / wabs) * pos.at(t, d);
      pooled = add(pooled, Var<Real>::constant(std::move(pos_readout)));
    }
    Var<Real> normed = layer_norm(pooled, ln_g, ln_b);
    return add(mean_axis(matmul(normed, out_w), 0), scale(out_b, -1.0));
  }

  Var<Real> encode(const Var<Real>& seq) const { return encode(seq, modality); }

  // Appends n_new zero-residual blocks. Exact function preservation: the
  // output for any input is unchanged until training moves the new weights.
  void grow_layers(int n_new, std::uint64_t seed) {
    if (n_new < 1) throw ConfigError("grow_layers: need at least one layer");
    Rng rng = Rng(seed).split(params.name).split("grow").split(blocks.size());
    for (int i = 0; i < n_new; ++i)
      blocks.push_back(TransformerLayer<Real>::zero_residual(embd, heads, tower_weight_scale(embd), rng));
    rebuild_registration();
  }

  int depth() const { return static_cast<int>(blocks.size()); }
};

namespace detail {

template <class Real>
Var<Real> clone_leaf(const Var<Real>& v) {
  return Var<Real>::leaf(v.value(), false);
}

// Independent copy: fresh leaves holding the same values.
template <class Real>
TransformerLayer<Real> clone_layer(const TransformerLayer<Real>& src) {
  TransformerLayer<Real> dst;
  dst.heads = src.heads;
  dst.ln1_g = clone_leaf(src.ln1_g);
  dst.ln1_b = clone_leaf(src.ln1_b);
  dst.wq = clone_leaf(src.wq);
  dst.bq = clone_leaf(src.bq);
  dst.wk = clone_leaf(src.wk);
  dst.bk = clone_leaf(src.bk);
  dst.wv = clone_leaf(src.wv);
  dst.bv = clone_leaf(src.bv);
  dst.wo = clone_leaf(src.wo);
  dst.bo = clone_leaf(src.bo);
  dst.ln2_g = clone_leaf(src.ln2_g);
  dst.ln2_b = clone_leaf(src.ln2_b);
  dst.w1 = clone_leaf(src.w1);
  dst.b1 = clone_leaf(src.b1);
  dst.w2 = clone_leaf(src.w2);
  dst.b2 = clone_leaf(src.b2);
  return dst;
}

}  // namespace detail

// Merges the per-modality towers into one shared joint tower: the leading
// (up to two) video-tower blocks are cloned, the rest of the depth is
// zero-residual, and the modality embeddings start at zero. With the video
// tower at depth <= 2 the joint tower therefore computes exactly the same
// video features at the moment of fusion. The retired towers are left
// untouched; clones share no storage with them.
template <class Real>
DynamicEncoder<Real> fuse(const DynamicEncoder<Real>& text_tower,
                          const DynamicEncoder<Real>& video_tower, int joint_depth,
                          std::uint64_t seed) {
  if (text_tower.embd != video_tower.embd)
    throw ConfigError("fuse: tower widths differ, " + std::to_string(text_tower.embd) + " vs " +
                      std::to_string(video_tower.embd));
  if (joint_depth < 1) throw ConfigError("fuse: joint depth must be at least 1");
  DynamicEncoder<Real> joint;
  joint.modality = Modality::joint;
  joint.embd = video_tower.embd;
  joint.heads = video_tower.heads;
  joint.params.name = modality_group_name(Modality::joint);
  const int carried = std::min({2, video_tower.depth(), joint_depth});
  for (int i = 0; i < carried; ++i)
    joint.blocks.push_back(detail::clone_layer(video_tower.blocks[static_cast<std::size_t>(i)]));
  Rng rng = Rng(seed).split("jas").split("fuse");
  while (joint.depth() < joint_depth)
    joint.blocks.push_back(
        TransformerLayer<Real>::zero_residual(joint.embd, joint.heads, tower_weight_scale(joint.embd), rng));
  joint.mod_text = Var<Real>::leaf(Tensor<Real>::zeros(Shape{joint.embd}), false);
  joint.mod_video = Var<Real>::leaf(Tensor<Real>::zeros(Shape{joint.embd}), false);
  joint.ln_g = detail::clone_leaf(video_tower.ln_g);
  joint.ln_b = detail::clone_leaf(video_tower.ln_b);
  joint.out_w = detail::clone_leaf(video_tower.out_w);
  joint.out_b = detail::clone_leaf(video_tower.out_b);
  joint.rebuild_registration();
  return joint;
}

template <class Real>
Var<Real> dyn_encode(const DynamicEncoder<Real>& de, const Var<Real>& seq, Modality tag) {
  return de.encode(seq, tag);
}

}  // namespace dfer
