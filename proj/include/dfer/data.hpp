#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dfer/errors.hpp"
#include "dfer/rng.hpp"
#include "dfer/tensor.hpp"

namespace dfer {

// Synthetic video recipe. Classes come in pairs sharing one spatial arc: the
// even class traverses it forward, the odd class backward. The temporal MEAN
// of a pair is therefore (noise aside) identical — only frame order separates
// them — so order-blind models cap out near 50% by construction.
struct DatasetSpec {
  std::int64_t classes = 4;
  std::int64_t samples_per_class = 75;
  std::int64_t frames = 16;
  std::int64_t image_edge = 32;  // the crop/encoder edge; frames render 4 px larger
  double noise = 0.03;           // per-pixel Gaussian sigma
  std::uint64_t seed = 0;

  std::int64_t source_edge() const { return image_edge + 4; }

  void validate() const {
    if (classes < 1 || samples_per_class < 1 || frames < 1)
      throw ConfigError("dataset spec: counts must be positive");
    if (image_edge < 8) throw ConfigError("dataset spec: image edge must be at least 8");
    if (noise < 0.0) throw ConfigError("dataset spec: noise must be non-negative");
  }
};

struct VideoSample {
  std::string id;
  std::int64_t label = 0;
  std::vector<Tensor<float>> frames;  // each [C,H,W], values in [0,1]
};

struct Dataset {
  std::int64_t classes = 0;
  std::int64_t frames = 0;
  std::vector<VideoSample> samples;
};

namespace detail {

constexpr double kArcSpan = 1.4;         // radians swept over the clip
constexpr double kOrbitRadius = 0.30;    // fraction of the source edge
constexpr double kBlobSigma = 0.13;      // fraction of the source edge
constexpr double kPhaseOffset = 0.35;    // odd-class jitter-center shift, in jitter units
constexpr double kPhaseJitterFrac = 0.05;  // jitter range, as a fraction of the arc span

// Per-sample phase jitter. Kept well under the arc span so the within-class
// scatter it causes stays smaller than the footprint of sweep direction in
// any reasonable clip readout (jitter at a large fraction of the span makes
// the two directions of a pair statistically indistinguishable to anything
// short of an ideal order detector). Also capped so the jittered arcs of
// different pairs can never overlap.
inline double phase_jitter_limit(std::int64_t classes) {
  const std::int64_t pairs = (classes + 1) / 2;
  const double slot = 2.0 * 3.14159265358979323846 / static_cast<double>(pairs);
  const double gap = slot - kArcSpan;  // angular clearance between adjacent arcs
  return std::min(kPhaseJitterFrac * kArcSpan, std::max(0.0, 0.45 * gap));
}

// One noise-free S-by-S frame with a Gaussian blob centered at (cx, cy).
inline Tensor<float> render_blob_frame(std::int64_t S, double cx, double cy, double sigma) {
  Tensor<float> frame(Shape{1, S, S});
  for (std::int64_t y = 0; y < S; ++y)
    for (std::int64_t x = 0; x < S; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      frame.at(0, y, x) =
          static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
    }
  return frame;
}

}  // namespace detail

// Noise-free frames for one class at one phase. Pure: equal (spec, label,
// phase) gives bit-identical pixels. The time parameter is the exact integer
// 2t-(F-1), so negating the direction IS the frame-reversal: class 2p+1 at
// phase f renders, frame for frame, the reverse of class 2p at phase f.
inline std::vector<Tensor<float>> render_trajectory(const DatasetSpec& spec, std::int64_t label,
                                                    double phase) {
  spec.validate();
  if (label < 0 || label >= spec.classes)
    throw ConfigError("render_trajectory: label " + std::to_string(label) + " out of range");
  const std::int64_t S = spec.source_edge();
  const std::int64_t F = spec.frames;
  const std::int64_t pairs = (spec.classes + 1) / 2;
  const double base = 2.0 * 3.14159265358979323846 * static_cast<double>(label / 2) /
                      static_cast<double>(pairs);
  const double dir = (label % 2 == 0) ? 1.0 : -1.0;
  const double radius = detail::kOrbitRadius * static_cast<double>(S);
  const double sigma = detail::kBlobSigma * static_cast<double>(S);
  const double mid = static_cast<double>(S - 1) / 2.0;

  std::vector<Tensor<float>> out;
  out.reserve(static_cast<std::size_t>(F));
  for (std::int64_t t = 0; t < F; ++t) {
    const std::int64_t u_num = 2 * t - (F - 1);  // symmetric: u(F-1-t) = -u(t) exactly
    const double u = F > 1 ? static_cast<double>(u_num) / static_cast<double>(2 * (F - 1)) : 0.0;
    const double ang = base + phase + dir * (detail::kArcSpan * u);
    out.push_back(detail::render_blob_frame(S, mid + radius * std::cos(ang),
                                            mid + radius * std::sin(ang), sigma));
  }
  return out;
}

// Class-agnostic calibration views: single frames whose blob sits at a
// uniformly random angle on the same orbit every class sweeps, with the same
// pixel noise and the deterministic center crop of an evaluation view. No
// label information is involved. Averaging a frozen backbone's response over
// these isolates the feature component shared by everything in the domain,
// which downstream consumers can then remove.
inline std::vector<Tensor<float>> probe_frames(const DatasetSpec& spec, std::int64_t count,
                                               std::uint64_t seed) {
  spec.validate();
  if (count < 1) throw ConfigError("probe_frames: count must be positive");
  const std::int64_t S = spec.source_edge();
  const double radius = detail::kOrbitRadius * static_cast<double>(S);
  const double sigma = detail::kBlobSigma * static_cast<double>(S);
  const double mid = static_cast<double>(S - 1) / 2.0;
  const std::int64_t off = (S - spec.image_edge) / 2;
  Rng rng = Rng(seed).split("calib-probe");
  std::vector<Tensor<float>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t k = 0; k < count; ++k) {
    const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    Tensor<float> src = detail::render_blob_frame(S, mid + radius * std::cos(ang),
                                                  mid + radius * std::sin(ang), sigma);
    if (spec.noise > 0.0)
      for (float& v : src.data) {
        const double noisy = static_cast<double>(v) + spec.noise * rng.gaussian();
        v = static_cast<float>(std::min(1.0, std::max(0.0, noisy)));
      }
    Tensor<float> view(Shape{1, spec.image_edge, spec.image_edge});
    for (std::int64_t y = 0; y < spec.image_edge; ++y)
      for (std::int64_t x = 0; x < spec.image_edge; ++x)
        view.at(0, y, x) = src.at(0, off + y, off + x);
    out.push_back(std::move(view));
  }
  return out;
}

// Full corpus: per sample, a phase drawn uniformly inside the pair-safe
// jitter range, then per-pixel Gaussian noise, clamped to [0,1].
//
// The two directions of a pair get slightly different phase-jitter centers.
// Sweep direction remains the dominant class signal, but the small static
// offset keeps forward/backward twins from being exactly symmetric on
// average — with perfectly matched static statistics, gradient training
// sits on a symmetry saddle and within-pair separation never starts.
inline Dataset gen_synthetic(const DatasetSpec& spec) {
  spec.validate();
  Dataset d;
  d.classes = spec.classes;
  d.frames = spec.frames;
  const double jitter = detail::phase_jitter_limit(spec.classes);
  for (std::int64_t c = 0; c < spec.classes; ++c) {
    const double center = (c % 2 == 0) ? 0.0 : detail::kPhaseOffset * jitter;
    for (std::int64_t s = 0; s < spec.samples_per_class; ++s) {
      Rng rng = Rng(spec.seed)
                    .split("data")
                    .split(static_cast<std::uint64_t>(c))
                    .split(static_cast<std::uint64_t>(s));
      const double phase = center + rng.uniform(-jitter, jitter);
      VideoSample sample;
      char idbuf[48];
      std::snprintf(idbuf, sizeof(idbuf), "c%lld_s%03lld", static_cast<long long>(c),
                    static_cast<long long>(s));
      sample.id = idbuf;
      sample.label = c;
      sample.frames = render_trajectory(spec, c, phase);
      if (spec.noise > 0.0) {
        for (Tensor<float>& frame : sample.frames)
          for (float& v : frame.data) {
            const double noisy = static_cast<double>(v) + spec.noise * rng.gaussian();
            v = static_cast<float>(std::min(1.0, std::max(0.0, noisy)));
          }
      }
      d.samples.push_back(std::move(sample));
    }
  }
  return d;
}

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// Deterministic 2:1 stratified split: within each class, every third sample
// (positions 2, 5, 8, ...) goes to the test side.
inline SplitDataset split_2to1(const Dataset& d) {
  SplitDataset out;
  out.train.classes = out.test.classes = d.classes;
  out.train.frames = out.test.frames = d.frames;
  std::vector<std::int64_t> seen(static_cast<std::size_t>(d.classes), 0);
  for (const VideoSample& s : d.samples) {
    if (s.label < 0 || s.label >= d.classes)
      throw ConfigError("split: sample label out of range");
    const std::int64_t pos = seen[static_cast<std::size_t>(s.label)]++;
    (pos % 3 == 2 ? out.test : out.train).samples.push_back(s);
  }
  return out;
}

// ---- frame sampling: consecutive window + crop ----

enum class SampleMode { train, eval };

struct FrameSelection {
  std::int64_t window = 0;  // first frame index
  std::int64_t oy = 0;      // crop top
  std::int64_t ox = 0;      // crop left
};

// One place decides all sampling offsets (draw order: window, oy, ox).
// Training offsets are seeded-random; crop offsets land on even pixels so
// the distinct-crop space stays small. Evaluation is the deterministic
// center window and center crop.
inline FrameSelection select_frames(std::int64_t f_have, std::int64_t f_target,
                                    std::int64_t src_h, std::int64_t src_w, std::int64_t crop,
                                    SampleMode mode, Rng& rng) {
  if (f_target < 1 || crop < 1) throw ConfigError("select_frames: bad target geometry");
  if (f_have < f_target)
    throw ShapeError("select_frames: sample has " + std::to_string(f_have) +
                     " frames, need " + std::to_string(f_target));
  if (src_h < crop || src_w < crop)
    throw ShapeError("select_frames: crop " + std::to_string(crop) + " exceeds frame " +
                     std::to_string(src_h) + "x" + std::to_string(src_w));
  FrameSelection sel;
  const std::int64_t wmax = f_have - f_target;
  const std::int64_t ymax = src_h - crop;
  const std::int64_t xmax = src_w - crop;
  if (mode == SampleMode::train) {
    sel.window = wmax > 0 ? static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(wmax + 1))) : 0;
    sel.oy = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(ymax / 2 + 1)));
    sel.ox = 2 * static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(xmax / 2 + 1)));
  } else {
    sel.window = wmax / 2;
    sel.oy = ymax / 2;
    sel.ox = xmax / 2;
  }
  return sel;
}

// Applies a FrameSelection: f_target consecutive frames, each cropped.
// Frame order is preserved by construction.
inline VideoSample sample_frames(const VideoSample& s, std::int64_t f_target, std::int64_t crop,
                                 SampleMode mode, Rng rng) {
  if (s.frames.empty()) throw ShapeError("sample_frames: sample has no frames");
  const Shape& fs = s.frames[0].shape;
  if (fs.size() != 3) throw ShapeError("sample_frames: frames must be [C,H,W]");
  FrameSelection sel = select_frames(static_cast<std::int64_t>(s.frames.size()), f_target,
                                     fs[1], fs[2], crop, mode, rng);
  VideoSample out;
  out.id = s.id;
  out.label = s.label;
  out.frames.reserve(static_cast<std::size_t>(f_target));
  for (std::int64_t t = 0; t < f_target; ++t) {
    const Tensor<float>& src = s.frames[static_cast<std::size_t>(sel.window + t)];
    if (src.shape != fs) throw ShapeError("sample_frames: ragged frame shapes");
    Tensor<float> dst(Shape{fs[0], crop, crop});
    for (std::int64_t c = 0; c < fs[0]; ++c)
      for (std::int64_t y = 0; y < crop; ++y)
        for (std::int64_t x = 0; x < crop; ++x)
          dst.at(c, y, x) = src.at(c, sel.oy + y, sel.ox + x);
    out.frames.push_back(std::move(dst));
  }
  return out;
}

// ---- raw frame files and manifests ----
// Frame file: u32 C,H,W then row-major 32-bit reals. Manifest: header line
// `classes=<n> frames=<F>`, then `id<TAB>label<TAB>path,path,...` per sample,
// paths relative to the manifest's directory.

inline void write_frame_file(const std::string& path, const Tensor<float>& frame) {
  if (frame.rank() != 3) throw ShapeError("write_frame_file: frame must be [C,H,W]");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(frame.shape[0]),
                                 static_cast<std::uint32_t>(frame.shape[1]),
                                 static_cast<std::uint32_t>(frame.shape[2])};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(frame.data.data()),
          static_cast<std::streamsize>(frame.data.size() * sizeof(float)));
  if (!f) throw IoError("write failed: " + path);
}

inline Tensor<float> read_frame_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open frame file: " + path);
  std::uint32_t dims[3];
  if (!f.read(reinterpret_cast<char*>(dims), sizeof(dims)))
    throw FormatError(FormatError::Kind::truncated, "frame file header short: " + path);
  constexpr std::uint32_t kMaxEdge = 1u << 16;
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || dims[0] > 16 || dims[1] > kMaxEdge ||
      dims[2] > kMaxEdge)
    throw FormatError(FormatError::Kind::bad_record, "frame file dims implausible: " + path);
  Tensor<float> t(Shape{dims[0], dims[1], dims[2]});
  if (!f.read(reinterpret_cast<char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float))))
    throw FormatError(FormatError::Kind::truncated, "frame file data short: " + path);
  char extra;
  if (f.read(&extra, 1))
    throw FormatError(FormatError::Kind::bad_record, "frame file has trailing bytes: " + path);
  return t;
}

// Writes the samples' frame files under <dir>/frames/ and a manifest at
// <dir>/<manifest_name> referencing them.
inline void export_dataset(const Dataset& d, const std::string& dir,
                           const std::string& manifest_name) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "frames", ec);
  if (ec) throw IoError("cannot create " + dir + "/frames: " + ec.message());
  std::string manifest = "classes=" + std::to_string(d.classes) +
                         " frames=" + std::to_string(d.frames) + "\n";
  for (const VideoSample& s : d.samples) {
    manifest += s.id + "\t" + std::to_string(s.label) + "\t";
    for (std::size_t k = 0; k < s.frames.size(); ++k) {
      const std::string rel = "frames/" + s.id + "_f" + std::to_string(k) + ".bin";
      write_frame_file((fs::path(dir) / rel).string(), s.frames[k]);
      manifest += (k ? "," : "") + rel;
    }
    manifest += "\n";
  }
  std::ofstream mf(fs::path(dir) / manifest_name, std::ios::binary | std::ios::trunc);
  if (!mf) throw IoError("cannot write manifest in " + dir);
  mf << manifest;
  if (!mf) throw IoError("manifest write failed in " + dir);
}

inline Dataset load_manifest(const std::string& path) {
  namespace fs = std::filesystem;
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  const fs::path base = fs::path(path).parent_path();

  std::string line;
  if (!std::getline(f, line)) throw ParseError(1, "empty manifest");
  Dataset d;
  {
    long long cls = 0, frm = 0;
    char tail = 0;
    if (std::sscanf(line.c_str(), "classes=%lld frames=%lld%c", &cls, &frm, &tail) != 2 ||
        cls < 1 || frm < 1)
      throw ParseError(1, "expected header `classes=<n> frames=<F>`, got: " + line);
    d.classes = cls;
    d.frames = frm;
  }

  Shape expect;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::size_t t1 = line.find('\t');
    const std::size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw ParseError(lineno, "expected id<TAB>label<TAB>paths");
    VideoSample s;
    s.id = line.substr(0, t1);
    if (s.id.empty()) throw ParseError(lineno, "empty sample id");
    const std::string label_str = line.substr(t1 + 1, t2 - t1 - 1);
    try {
      std::size_t used = 0;
      s.label = std::stoll(label_str, &used);
      if (used != label_str.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad label: " + label_str);
    }
    if (s.label < 0 || s.label >= d.classes)
      throw ParseError(lineno, "label " + std::to_string(s.label) + " outside declared " +
                                   std::to_string(d.classes) + " classes");
    // comma-separated frame paths
    std::size_t start = t2 + 1;
    while (start <= line.size()) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) comma = line.size();
      const std::string rel = line.substr(start, comma - start);
      if (rel.empty()) throw ParseError(lineno, "empty frame path");
      Tensor<float> frame;
      try {
        frame = read_frame_file((base / rel).string());
      } catch (const Error& e) {
        throw ParseError(lineno, std::string("frame file: ") + e.what());
      }
      if (!frame.all_finite()) throw ParseError(lineno, "non-finite pixels in " + rel);
      if (expect.empty())
        expect = frame.shape;
      else if (frame.shape != expect)
        throw ParseError(lineno, "frame shape " + shape_str(frame.shape) +
                                     " differs from first sample's " + shape_str(expect));
      s.frames.push_back(std::move(frame));
      start = comma + 1;
    }
    if (static_cast<std::int64_t>(s.frames.size()) != d.frames)
      throw ParseError(lineno, "sample has " + std::to_string(s.frames.size()) +
                                   " frames, header declares " + std::to_string(d.frames));
    d.samples.push_back(std::move(s));
  }
  if (d.samples.empty()) throw ParseError(1, "manifest lists no samples");
  return d;
}

}  // namespace dfer
