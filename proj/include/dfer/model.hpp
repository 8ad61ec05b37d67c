#pragma once

#include <cstdint>
#include <optional>
#include <unordered_map>
#include <vector>

#include "dfer/classify.hpp"
#include "dfer/config.hpp"
#include "dfer/data.hpp"
#include "dfer/encoders.hpp"
#include "dfer/jas.hpp"
#include "dfer/mat.hpp"

namespace dfer {

// The full model: frozen encoders, the learnable token bank, and whichever
// alignment towers the training schedule has brought into existence so far.
// `stage` selects the active feature paths:
//   1: video = temporal mean of frame features, text = text tower
//   2: video = video tower,                     text = text tower (frozen)
//   3: video and text both through the joint tower
template <class Real>
struct Pipeline {
  RunConfig cfg;
  FrozenEncoder<Real> text_enc;
  FrozenEncoder<Real> image_enc;
  MatBank<Real> mat;
  std::optional<DynamicEncoder<Real>> de_text;
  std::optional<DynamicEncoder<Real>> de_video;
  std::optional<DynamicEncoder<Real>> jas;
  int stage = 0;  // 0 = untrained; 1..3 as above

  static Pipeline init(const RunConfig& cfg) {
    cfg.validate();
    Pipeline p;
    p.cfg = cfg;
    const EncoderConfig ec = cfg.encoder_config();
    p.text_enc = FrozenEncoder<Real>::init_toy(ec, EncoderKind::text, cfg.seed);
    p.image_enc = FrozenEncoder<Real>::init_toy(ec, EncoderKind::image, cfg.seed);
    // Center the frozen image backbone on the deployment domain: unlabeled
    // views, so nothing class-specific leaks into a frozen component.
    p.image_enc.calibrate_on(probe_frames(cfg.dataset_spec(), 64, cfg.seed));
    p.mat = MatBank<Real>::init(cfg.classes, cfg.snt, cfg.tkn, cfg.embd, cfg.seed, cfg.tkn_max);
    if (cfg.paradigm == Paradigm::bap) {
      p.de_text = DynamicEncoder<Real>::fresh(Modality::text, cfg.embd,
                                              static_cast<int>(cfg.heads),
                                              static_cast<int>(cfg.text_layers),
                                              TowerInit::random, cfg.seed);
    } else {
      p.jas = DynamicEncoder<Real>::fresh(Modality::joint, cfg.embd,
                                          static_cast<int>(cfg.heads),
                                          static_cast<int>(cfg.joint_depth),
                                          TowerInit::random, cfg.seed);
    }
    return p;
  }

  // Every parameter group that currently exists, encoders included.
  std::vector<ParamGroup<Real>*> groups() {
    std::vector<ParamGroup<Real>*> g = {&text_enc.params, &image_enc.params, &mat.params};
    if (de_text) g.push_back(&de_text->params);
    if (de_video) g.push_back(&de_video->params);
    if (jas) g.push_back(&jas->params);
    return g;
  }

  ParamGroup<Real>* find_group(const std::string& name) {
    for (ParamGroup<Real>* g : groups())
      if (g->name == name) return g;
    return nullptr;
  }
};

// Class-side reduction of a [Snt, D] sentence-feature sequence.
template <class Real>
Var<Real> encode_class_sequence(const Pipeline<Real>& p, const Var<Real>& seq) {
  switch (p.stage) {
    case 1:
    case 2:
      if (!p.de_text) throw StateError("pipeline: no text tower");
      return p.de_text->encode(seq, Modality::text);
    case 3:
      if (!p.jas) throw StateError("pipeline: no joint tower");
      return p.jas->encode(seq, Modality::text);
    default:
      throw StateError("pipeline: stage " + std::to_string(p.stage) + " has no text path");
  }
}

// Video-side reduction of a [F, D] frame-feature sequence.
template <class Real>
Var<Real> encode_video_sequence(const Pipeline<Real>& p, const Var<Real>& seq) {
  switch (p.stage) {
    case 1:
      return mean_axis(seq, 0);
    case 2:
      if (!p.de_video) throw StateError("pipeline: no video tower");
      return p.de_video->encode(seq, Modality::video);
    case 3:
      if (!p.jas) throw StateError("pipeline: no joint tower");
      return p.jas->encode(seq, Modality::video);
    default:
      throw StateError("pipeline: stage " + std::to_string(p.stage) + " has no video path");
  }
}

// Graph-level class features for all classes: token bank -> contexts ->
// frozen text encoder -> per-class sentence sequence -> stage's class path.
// Gradients flow through the frozen encoder into the bank when it trains.
template <class Real>
std::vector<Var<Real>> class_features(const Pipeline<Real>& p) {
  auto grid = encode_all(p.mat, p.text_enc);  // [cls][snt] of [D]
  std::vector<Var<Real>> out;
  out.reserve(grid.size());
  for (const auto& row : grid) {
    Var<Real> seq = stack_rows(std::span<const Var<Real>>(row));
    out.push_back(encode_class_sequence(p, seq));
  }
  return out;
}

// Same, as plain values (for evaluation and for freezing during the
// video-tower stage, where the text side cannot change).
template <class Real>
std::vector<Tensor<Real>> class_feature_values(const Pipeline<Real>& p) {
  std::vector<Tensor<Real>> out;
  for (const Var<Real>& v : class_features(p)) out.push_back(v.value());
  return out;
}

namespace detail {

template <class Real>
Tensor<Real> crop_cast(const Tensor<float>& src, std::int64_t oy, std::int64_t ox,
                       std::int64_t crop) {
  Tensor<Real> dst(Shape{src.shape[0], crop, crop});
  for (std::int64_t c = 0; c < src.shape[0]; ++c)
    for (std::int64_t y = 0; y < crop; ++y)
      for (std::int64_t x = 0; x < crop; ++x)
        dst.at(c, y, x) = static_cast<Real>(src.at(c, oy + y, ox + x));
  return dst;
}

}  // namespace detail

// Frame features through the frozen image encoder, memoized per
// (sample, window, crop) selection. Legitimate because the encoder is
// immutable: re-encoding the same pixels is bit-identical to the cache hit.
template <class Real>
struct FeatureCache {
  const Dataset* data = nullptr;
  const FrozenEncoder<Real>* enc = nullptr;
  std::int64_t f_target = 0;
  std::int64_t crop = 0;
  std::unordered_map<std::uint64_t, Tensor<Real>> store;

  FeatureCache() = default;
  FeatureCache(const Dataset& d, const FrozenEncoder<Real>& e, std::int64_t f, std::int64_t c)
      : data(&d), enc(&e), f_target(f), crop(c) {}

  const Tensor<Real>& frames(std::int64_t idx, const FrameSelection& sel) {
    const std::uint64_t key = (static_cast<std::uint64_t>(idx) << 32) |
                              (static_cast<std::uint64_t>(sel.window) << 20) |
                              (static_cast<std::uint64_t>(sel.oy) << 10) |
                              static_cast<std::uint64_t>(sel.ox);
    auto it = store.find(key);
    if (it != store.end()) return it->second;
    const VideoSample& s = data->samples[static_cast<std::size_t>(idx)];
    Tensor<Real> feats(Shape{f_target, enc->config.embd});
    for (std::int64_t t = 0; t < f_target; ++t) {
      Tensor<Real> pixels = detail::crop_cast<Real>(
          s.frames[static_cast<std::size_t>(sel.window + t)], sel.oy, sel.ox, crop);
      Tensor<Real> f = enc->encode_image(pixels).value();
      for (std::int64_t j = 0; j < enc->config.embd; ++j) feats.at(t, j) = f[j];
    }
    return store.emplace(key, std::move(feats)).first->second;
  }

  FrameSelection selection(std::int64_t idx, SampleMode mode, Rng rng) const {
    const VideoSample& s = data->samples[static_cast<std::size_t>(idx)];
    const Shape& fs = s.frames.at(0).shape;
    return select_frames(static_cast<std::int64_t>(s.frames.size()), f_target, fs[1], fs[2],
                         crop, mode, rng);
  }

  const Tensor<Real>& train_frames(std::int64_t idx, Rng rng) {
    return frames(idx, selection(idx, SampleMode::train, rng));
  }

  const Tensor<Real>& eval_frames(std::int64_t idx) {
    Rng unused(0);
    return frames(idx, selection(idx, SampleMode::eval, unused));
  }
};

// Graph-level video feature for one frame-feature tensor.
template <class Real>
Var<Real> video_feature(const Pipeline<Real>& p, const Tensor<Real>& frame_feats) {
  return encode_video_sequence(p, Var<Real>::constant(frame_feats));
}

}  // namespace dfer
