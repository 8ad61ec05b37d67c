#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dfer/encoder_config.hpp"
#include "dfer/tensorfile.hpp"
#include "dfer/transformer.hpp"

namespace dfer {

enum class EncoderKind { text, image };

// A label context ready for text encoding: a fixed-height token matrix in
// which rows at and beyond valid_len are exactly zero padding.
template <class Real>
struct TokenContext {
  Var<Real> tokens;  // [tkn_max, embd]
  std::int64_t valid_len = 0;
};

// Frozen feature extractor, text or image flavor. Initialized once from a
// seed (toy stand-in for a pretrained backbone) or loaded from a container
// file; its parameter group is locked and can never be marked trainable.
//
// Text flavor consumes a TokenContext and pools at the last valid row.
// Computation runs on the valid prefix only, which is exactly equivalent to
// masked attention over the zero padding and makes padding neutrality hold
// by construction.
//
// Image flavor consumes one [channels, S, S] frame: non-overlapping patch
// embedding, a learned class token at row 0, fixed sinusoidal positions,
// then the transformer stack; pooling reads the class-token row.
template <class Real>
struct FrozenEncoder {
  EncoderConfig config;
  EncoderKind kind = EncoderKind::text;
  std::vector<TransformerLayer<Real>> blocks;
  Var<Real> lnf_g, lnf_b;
  // Mean pooled response over a class-agnostic probe batch, subtracted before
  // the final LayerNorm. A backbone this size has a large input-independent
  // component in every feature it emits; left in, that shared direction
  // dwarfs the content signal and every downstream cosine similarity lands in
  // a band of a few percent. Real pretrained backbones have this property
  // beaten out of them by training; the toy stand-in gets it by calibration.
  Var<Real> calib_mu;
  Var<Real> pos;                          // fixed, not a parameter
  Var<Real> patch_w, patch_b, cls_token;  // image flavor only
  ParamGroup<Real> params;

  static FrozenEncoder init_toy(const EncoderConfig& cfg, EncoderKind kind, std::uint64_t seed) {
    cfg.validate();
    FrozenEncoder e;
    e.config = cfg;
    e.kind = kind;
    Rng rng = Rng(seed).split(kind == EncoderKind::text ? "toy-text" : "toy-image");
    for (std::int64_t i = 0; i < cfg.layers; ++i)
      e.blocks.push_back(TransformerLayer<Real>::random(cfg.embd, static_cast<int>(cfg.heads),
                                                        tower_weight_scale(cfg.embd), rng));
    e.lnf_g = Var<Real>::leaf(Tensor<Real>::full(Shape{cfg.embd}, Real(1)), false);
    e.lnf_b = Var<Real>::leaf(Tensor<Real>::zeros(Shape{cfg.embd}), false);
    const std::int64_t pos_len = kind == EncoderKind::text ? cfg.tkn_max : cfg.patches() + 1;
    // Positions only need to break location symmetry. At full sinusoidal
    // amplitude they swamp the content signal and the frozen features
    // collapse toward an input-independent constant, so scale them down.
    Tensor<Real> pos = sinusoidal_positions<Real>(pos_len, cfg.embd);
    for (Real& v : pos.data) v = static_cast<Real>(v * Real(0.1));
    e.pos = Var<Real>::constant(std::move(pos));
    if (kind == EncoderKind::image) {
      const std::int64_t fan_in = cfg.channels * cfg.image_patch * cfg.image_patch;
      Tensor<Real> pw(Shape{fan_in, cfg.embd});
      pw.fill_gaussian(rng, 0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
      e.patch_w = Var<Real>::leaf(std::move(pw), false);
      // The bias must not be zero: patches with no content would then carry
      // pure pixel noise, and the first block's normalization would blow each
      // of them up to a full-scale garbage row. A fixed bias gives empty
      // patches a shared, nearly constant embedding instead.
      Tensor<Real> pb(Shape{cfg.embd});
      pb.fill_gaussian(rng, 0.0, 0.2);
      e.patch_b = Var<Real>::leaf(std::move(pb), false);
      Tensor<Real> ct(Shape{cfg.embd});
      ct.fill_gaussian(rng, 0.0, 0.02);
      e.cls_token = Var<Real>::leaf(std::move(ct), false);
    }
    e.calib_mu = Var<Real>::leaf(Tensor<Real>::zeros(Shape{cfg.embd}), false);
    e.params.name = kind == EncoderKind::text ? "enc_text" : "enc_image";
    e.params.locked = true;
    e.register_params();
    e.calibrate(Rng(seed).split(kind == EncoderKind::text ? "toy-text" : "toy-image")
                    .split("calib"));
    return e;
  }

  // Estimates the mean pooled backbone response over a small batch of
  // class-agnostic probes (noise frames / random token rows) and stores it in
  // calib_mu. Runs with calib_mu at zero, so the measurement is unbiased.
  void calibrate(Rng rng) {
    constexpr int kProbes = 16;
    Tensor<Real> mu(Shape{config.embd});
    for (int k = 0; k < kProbes; ++k) {
      Tensor<Real> pooled;
      if (kind == EncoderKind::image) {
        Tensor<Real> frame(Shape{config.channels, config.image_size, config.image_size});
        frame.fill_gaussian(rng, 0.0, 0.25);
        pooled = select(backbone_rows_image(frame), 0).value();
      } else {
        Tensor<Real> toks(Shape{config.tkn_max, config.embd});
        toks.fill_gaussian(rng, 0.0, 1.0);
        TokenContext<Real> ctx{Var<Real>::constant(std::move(toks)), config.tkn_max};
        pooled = select(backbone_rows_text(ctx), config.tkn_max - 1).value();
      }
      for (std::int64_t d = 0; d < config.embd; ++d)
        mu[d] += pooled[d] / Real(kProbes);
    }
    calib_mu.mutable_value() = std::move(mu);
  }

  // Re-estimates calib_mu from caller-supplied probe images. The generic
  // noise probes above capture the blank-input response; a backbone deployed
  // on a specific domain should instead be centered on that domain's views
  // (every real input shares content structure a noise probe never shows).
  // The caller supplies unlabeled views; class balance is irrelevant.
  void calibrate_on(const std::vector<Tensor<Real>>& frames) {
    if (kind != EncoderKind::image) throw StateError("calibrate_on: image flavor only");
    if (frames.empty()) throw ConfigError("calibrate_on: need at least one probe view");
    Tensor<Real> mu(Shape{config.embd});
    for (const Tensor<Real>& f : frames) {
      const Tensor<Real> pooled = select(backbone_rows_image(f), 0).value();
      for (std::int64_t d = 0; d < config.embd; ++d)
        mu[d] += pooled[d] / Real(frames.size());
    }
    calib_mu.mutable_value() = std::move(mu);
  }

  Var<Real> encode_text(const TokenContext<Real>& ctx) const {
    if (kind != EncoderKind::text) throw StateError("encode_text on an image encoder");
    if (ctx.tokens.value().rank() != 2 || ctx.tokens.shape()[0] != config.tkn_max ||
        ctx.tokens.shape()[1] != config.embd)
      throw ShapeError("encode_text: context must be [" + std::to_string(config.tkn_max) + "," +
                       std::to_string(config.embd) + "], got " + shape_str(ctx.tokens.shape()));
    if (ctx.valid_len < 1 || ctx.valid_len > config.tkn_max)
      throw ConfigError("encode_text: valid_len " + std::to_string(ctx.valid_len) +
                        " outside [1, " + std::to_string(config.tkn_max) + "]");
    Var<Real> x = add_rowwise(backbone_rows_text(ctx), scale(calib_mu, -1.0));
    x = layer_norm(x, lnf_g, lnf_b);
    return select(x, ctx.valid_len - 1);
  }

  Var<Real> encode_image(const Tensor<Real>& frame) const {
    if (kind != EncoderKind::image) throw StateError("encode_image on a text encoder");
    if (frame.rank() != 3 || frame.shape[0] != config.channels ||
        frame.shape[1] != config.image_size || frame.shape[2] != config.image_size)
      throw ShapeError("encode_image: frame must be [" + std::to_string(config.channels) + "," +
                       std::to_string(config.image_size) + "," +
                       std::to_string(config.image_size) + "], got " + shape_str(frame.shape));
    Var<Real> x = add_rowwise(backbone_rows_image(frame), scale(calib_mu, -1.0));
    x = layer_norm(x, lnf_g, lnf_b);
    return select(x, 0);
  }

 private:
  // Backbone up to (not including) calibration and the final LayerNorm.
  Var<Real> backbone_rows_text(const TokenContext<Real>& ctx) const {
    Var<Real> x = rows(ctx.tokens, 0, ctx.valid_len);
    x = add(x, rows(pos, 0, ctx.valid_len));
    for (const auto& b : blocks) x = b.forward(x);
    return x;
  }

  Var<Real> backbone_rows_image(const Tensor<Real>& frame) const {
    const std::int64_t p = config.image_patch;
    const std::int64_t grid = config.image_size / p;
    Tensor<Real> patches(Shape{grid * grid, config.channels * p * p});
    for (std::int64_t py = 0; py < grid; ++py)
      for (std::int64_t px = 0; px < grid; ++px) {
        const std::int64_t n = py * grid + px;
        for (std::int64_t ch = 0; ch < config.channels; ++ch)
          for (std::int64_t r = 0; r < p; ++r)
            for (std::int64_t q = 0; q < p; ++q)
              patches.at(n, (ch * p + r) * p + q) = frame.at(ch, py * p + r, px * p + q);
      }
    Var<Real> e = add_rowwise(matmul(Var<Real>::constant(std::move(patches)), patch_w), patch_b);
    Var<Real> x = concat(reshape(cls_token, Shape{1, config.embd}), e, 0);
    x = add(x, pos);
    for (const auto& b : blocks) x = b.forward(x);
    return x;
  }

  void register_params() {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(params, "layer" + std::to_string(i) + "/");
    params.add("final_ln/g", lnf_g);
    params.add("final_ln/b", lnf_b);
    params.add("calib_mu", calib_mu);
    if (kind == EncoderKind::image) {
      params.add("patch/w", patch_w);
      params.add("patch/b", patch_b);
      params.add("cls_token", cls_token);
    }
  }
};

inline void save_encoder(const std::string& path, const FrozenEncoder<float>& enc) {
  TensorFile tf;
  tf.kind = enc.kind == EncoderKind::text ? FileKind::text_encoder : FileKind::image_encoder;
  tf.config = enc.config;
  for (const auto& [name, v] : enc.params.params) tf.records.push_back({name, v.value()});
  write_tensor_file(path, tf);
}

inline FrozenEncoder<float> load_encoder(const std::string& path, EncoderKind expected) {
  TensorFile tf = read_tensor_file(path);
  const FileKind want =
      expected == EncoderKind::text ? FileKind::text_encoder : FileKind::image_encoder;
  if (tf.kind != want)
    throw FormatError(FormatError::Kind::bad_kind,
                      path + ": wrong container kind for this encoder flavor");
  FrozenEncoder<float> enc = FrozenEncoder<float>::init_toy(tf.config, expected, 0);
  if (tf.records.size() != enc.params.params.size())
    throw FormatError(FormatError::Kind::bad_record,
                      path + ": parameter count mismatch against geometry");
  for (auto& [name, v] : enc.params.params) {
    const TensorRecord* r = tf.find(name);
    if (!r) throw FormatError(FormatError::Kind::bad_record, path + ": missing tensor " + name);
    if (r->tensor.shape != v.shape())
      throw FormatError(FormatError::Kind::bad_record,
                        path + ": shape mismatch for " + name + ", file " +
                            shape_str(r->tensor.shape) + " vs model " + shape_str(v.shape()));
    v.mutable_value() = r->tensor;
  }
  return enc;
}

}  // namespace dfer
