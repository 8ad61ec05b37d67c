#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfer/eval.hpp"
#include "dfer/model.hpp"
#include "dfer/optim.hpp"
#include "dfer/tensorfile.hpp"

namespace dfer {

// The single-phase baseline trains the final architecture in one go; it is
// addressed as a pseudo-stage so schedules and RNG streams stay disjoint
// from the three staged phases.
inline constexpr int kAllAtOnceStage = 4;

// What one training phase does: how long, how hot, what moves, what grows.
struct StagePlan {
  int stage = 1;
  std::int64_t epochs = 0;
  double lr = 0.0;
  std::int64_t batch = 0;
  double momentum = 0.9;
  std::vector<GrowthEvent> growth;
  std::vector<std::string> trainable_groups;
  std::vector<std::string> frozen_groups;
};

inline StagePlan plan_for_stage(const RunConfig& cfg, int stage) {
  StagePlan p;
  p.stage = stage;
  p.batch = cfg.batch;
  p.momentum = cfg.momentum;
  switch (stage) {
    case 1:
      p.epochs = cfg.epochs1;
      p.lr = cfg.lr1;
      p.growth = cfg.growth1;
      p.trainable_groups = {"mat", "de_text"};
      p.frozen_groups = {"enc_text", "enc_image"};
      break;
    case 2:
      p.epochs = cfg.epochs2;
      p.lr = cfg.lr2;
      p.growth = cfg.growth2;
      p.trainable_groups = {"de_video"};
      p.frozen_groups = {"enc_text", "enc_image", "mat", "de_text"};
      break;
    case 3:
      p.epochs = cfg.epochs3;
      p.lr = cfg.lr3;
      p.trainable_groups = {"mat", "jas"};
      p.frozen_groups = {"enc_text", "enc_image", "de_text", "de_video"};
      break;
    case kAllAtOnceStage:
      p.epochs = cfg.epochs1 + cfg.epochs2 + cfg.epochs3;
      p.lr = cfg.lr1;
      p.trainable_groups = {"mat", "jas"};
      p.frozen_groups = {"enc_text", "enc_image"};
      break;
    default:
      throw ConfigError("plan_for_stage: unknown stage " + std::to_string(stage));
  }
  return p;
}

struct EpochRow {
  int stage = 0;
  std::int64_t epoch = 0;  // 1-based within its stage
  double mean_loss = 0.0;
  double train_war = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  double seconds = 0.0;

  void append(const TrainReport& other) {
    rows.insert(rows.end(), other.rows.begin(), other.rows.end());
    seconds += other.seconds;
  }
};

inline std::string train_report_csv(const TrainReport& r) {
  std::string csv = "stage,epoch,mean_loss,train_war\n";
  char buf[96];
  for (const EpochRow& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.9f,%.9f\n", row.stage,
                  static_cast<long long>(row.epoch), row.mean_loss, row.train_war);
    csv += buf;
  }
  std::snprintf(buf, sizeof(buf), "# wall_seconds,%.3f\n", r.seconds);
  csv += buf;
  return csv;
}

// Observation points for tests and ablations; all optional.
struct TrainHooks {
  std::function<void(int stage, std::int64_t epoch)> pre_growth;
  std::function<void(int stage, std::int64_t epoch)> post_growth;
  std::function<void(int stage, std::int64_t epoch, double mean_loss, double train_war)> epoch_end;
};

// Freezes everything, then wakes only the phase's trainable groups.
template <class Real>
void apply_stage_masking(Pipeline<Real>& p, int stage) {
  p.mat.params.set_trainable(false);
  if (p.de_text) p.de_text->params.set_trainable(false);
  if (p.de_video) p.de_video->params.set_trainable(false);
  if (p.jas) p.jas->params.set_trainable(false);
  const StagePlan plan = plan_for_stage(p.cfg, stage);
  for (const std::string& name : plan.trainable_groups) {
    ParamGroup<Real>* g = p.find_group(name);
    if (!g) throw StateError("stage " + std::to_string(stage) + " needs group `" + name +
                             "`, which does not exist yet");
    g->set_trainable(true);
  }
}

// Builds whatever towers the given phase needs (idempotent, so resuming a
// phase whose towers were restored from a checkpoint changes nothing).
template <class Real>
void prepare_stage(Pipeline<Real>& p, int stage) {
  if (stage == kAllAtOnceStage) {
    if (p.cfg.paradigm != Paradigm::all_at_once)
      throw StateError("single-phase training requires paradigm = all_at_once");
    if (!p.jas) throw StateError("single-phase pipeline is missing its joint tower");
    return;
  }
  if (p.cfg.paradigm != Paradigm::bap)
    throw StateError("staged training requires paradigm = bap");
  if (!p.de_text) throw StateError("staged pipeline is missing its text tower");
  // The video tower starts as an identity map (zero-residual blocks): its
  // first output is the plain trend readout of the frame features, which is
  // already class-informative, and the phase only has to learn the residual
  // refinement on top. A randomly initialised tower instead starts from a
  // scrambled constellation that the frozen class anchors cannot meet halfway.
  if (stage >= 2 && !p.de_video)
    p.de_video = DynamicEncoder<Real>::fresh(Modality::video, p.cfg.embd,
                                             static_cast<int>(p.cfg.heads),
                                             static_cast<int>(p.cfg.video_layers),
                                             TowerInit::zero_residual, p.cfg.seed);
  if (stage >= 3 && !p.jas)
    p.jas = fuse(*p.de_text, *p.de_video, static_cast<int>(p.cfg.joint_depth), p.cfg.seed);
}

// Runs one phase from start_epoch (already-completed count) up to stop_after
// (0 = the phase's full length). Epoch-scoped RNG streams are keyed by
// absolute (stage, epoch), so a stopped-and-resumed phase retraces the
// uninterrupted trajectory bit for bit.
template <class Real>
TrainReport run_one_stage(Pipeline<Real>& p, int stage, std::int64_t start_epoch,
                          std::int64_t stop_after, const Dataset& train,
                          FeatureCache<Real>& cache, std::vector<double>& loss_history,
                          const TrainHooks* hooks = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const StagePlan plan = plan_for_stage(p.cfg, stage);
  if (stop_after <= 0) stop_after = plan.epochs;
  if (start_epoch < 0 || start_epoch >= stop_after || stop_after > plan.epochs)
    throw StateError("run_one_stage: epoch window [" + std::to_string(start_epoch + 1) + "," +
                     std::to_string(stop_after) + "] invalid for a " +
                     std::to_string(plan.epochs) + "-epoch phase");
  if (train.samples.empty()) throw ShapeError("run_one_stage: empty training set");

  prepare_stage(p, stage);
  p.stage = stage == kAllAtOnceStage ? 3 : stage;
  apply_stage_masking(p, stage);
  if (start_epoch == 0)
    for (ParamGroup<Real>* g : p.groups()) g->clear_velocity();

  // Growth events at or before the resume point are already baked into the
  // restored tower's depth; only the ones still ahead will fire below.
  DynamicEncoder<Real>* grower = stage == 1   ? (p.de_text ? &*p.de_text : nullptr)
                                 : stage == 2 ? (p.de_video ? &*p.de_video : nullptr)
                                              : nullptr;
  for (const GrowthEvent& ev : plan.growth)
    if (!grower && ev.epoch > start_epoch)
      throw StateError("run_one_stage: growth scheduled but no growable tower in this phase");

  // Text features are immutable during the video-tower phase: compute once.
  std::vector<Tensor<Real>> frozen_class_feats;
  if (stage == 2) frozen_class_feats = class_feature_values(p);

  TrainReport report;
  const std::int64_t n = static_cast<std::int64_t>(train.samples.size());
  const std::uint64_t stage_tag = static_cast<std::uint64_t>(stage);

  for (std::int64_t epoch = start_epoch + 1; epoch <= stop_after; ++epoch) {
    for (const GrowthEvent& ev : plan.growth) {
      if (ev.epoch != epoch) continue;
      if (hooks && hooks->pre_growth) hooks->pre_growth(stage, epoch);
      grower->grow_layers(static_cast<int>(ev.layers), p.cfg.seed);
      if (hooks && hooks->post_growth) hooks->post_growth(stage, epoch);
    }

    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng = stream(p.cfg.seed, "order", {stage_tag, static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::int64_t b0 = 0; b0 < n; b0 += plan.batch) {
      const std::int64_t b1 = std::min<std::int64_t>(n, b0 + plan.batch);

      std::vector<Var<Real>> cls_feats;
      if (stage == 2) {
        cls_feats.reserve(frozen_class_feats.size());
        for (const Tensor<Real>& t : frozen_class_feats)
          cls_feats.push_back(Var<Real>::constant(t));
      } else {
        cls_feats = class_features(p);
      }
      const std::span<const Var<Real>> cls_span(cls_feats);

      std::vector<Var<Real>> losses;
      losses.reserve(static_cast<std::size_t>(b1 - b0));
      for (std::int64_t bi = b0; bi < b1; ++bi) {
        const std::int64_t idx = order[static_cast<std::size_t>(bi)];
        Rng crop_rng = stream(p.cfg.seed, "crop",
                              {stage_tag, static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(idx)});
        const Tensor<Real>& feats = cache.train_frames(idx, crop_rng);
        Var<Real> vf = video_feature(p, feats);
        losses.push_back(alignment_loss(vf, cls_span, p.cfg.tau,
                                        train.samples[static_cast<std::size_t>(idx)].label));
      }
      Var<Real> batch_loss = average(std::span<const Var<Real>>(losses));
      GradMap<Real> grads = grad(batch_loss);
      for (ParamGroup<Real>* g : p.groups())
        if (g->trainable) sgd_momentum_step(*g, grads, plan.lr, plan.momentum);
      loss_sum += static_cast<double>(batch_loss.value()[0]) * static_cast<double>(b1 - b0);
    }

    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss)) throw NumericError("training diverged: non-finite epoch loss");
    const MetricsReport train_metrics = evaluate(p, cache, train);

    report.rows.push_back({stage, epoch, mean_loss, train_metrics.war});
    loss_history.push_back(mean_loss);
    if (hooks && hooks->epoch_end) hooks->epoch_end(stage, epoch, mean_loss, train_metrics.war);
  }

  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// The full schedule: three staged phases, or the single-phase baseline,
// depending on the config's paradigm.
template <class Real>
TrainReport run_all(Pipeline<Real>& p, const Dataset& train, FeatureCache<Real>& cache,
                    std::vector<double>& loss_history, const TrainHooks* hooks = nullptr) {
  TrainReport report;
  if (p.cfg.paradigm == Paradigm::bap) {
    for (int stage = 1; stage <= 3; ++stage)
      report.append(run_one_stage(p, stage, 0, 0, train, cache, loss_history, hooks));
  } else {
    report.append(run_one_stage(p, kAllAtOnceStage, 0, 0, train, cache, loss_history, hooks));
  }
  return report;
}

// ---- persistence ----
// A checkpoint is the named-tensor container holding every parameter of
// every group ("<group>/<name>"), optimizer velocities ("momentum/..."),
// and a footer with the phase position, seed, config echo and loss history.

inline constexpr const char* kMomentumPrefix = "momentum/";

template <class Real>
Tensor<float> to_f32(const Tensor<Real>& t) {
  Tensor<float> out(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i)
    out.data[i] = static_cast<float>(t.data[i]);
  return out;
}

inline void save_checkpoint(const std::string& path, Pipeline<float>& p,
                            std::int64_t epochs_done, const std::vector<double>& loss_history) {
  TensorFile tf;
  tf.kind = FileKind::checkpoint;
  tf.config = p.cfg.encoder_config();
  for (ParamGroup<float>* g : p.groups()) {
    for (const auto& [name, var] : g->params)
      tf.records.push_back({g->name + "/" + name, var.value()});
    for (const auto& [name, var] : g->params) {
      auto it = g->velocity.find(name);
      if (it != g->velocity.end())
        tf.records.push_back({kMomentumPrefix + g->name + "/" + name, it->second});
    }
  }
  CheckpointExtra extra;
  extra.stage = static_cast<std::uint32_t>(
      p.cfg.paradigm == Paradigm::all_at_once ? kAllAtOnceStage : p.stage);
  extra.epochs_done = static_cast<std::uint32_t>(epochs_done);
  extra.seed = p.cfg.seed;
  extra.config_echo = p.cfg.echo();
  extra.loss_history = loss_history;
  tf.extra = extra;
  write_tensor_file(path, tf);
}

struct LoadedRun {
  Pipeline<float> pipeline;
  int stage = 0;  // phase the run was in (1..3, or the baseline pseudo-stage)
  std::int64_t epochs_done = 0;
  std::vector<double> loss_history;
};

namespace detail {

// Highest layer index + 1 among records named <group>/layer<k>/..., or 0.
inline int recorded_depth(const TensorFile& tf, const std::string& group) {
  const std::string prefix = group + "/layer";
  int depth = 0;
  for (const TensorRecord& r : tf.records) {
    if (r.name.rfind(prefix, 0) != 0) continue;
    const std::size_t slash = r.name.find('/', prefix.size());
    if (slash == std::string::npos) continue;
    try {
      depth = std::max(depth, std::stoi(r.name.substr(prefix.size(), slash - prefix.size())) + 1);
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::bad_record, "malformed record name: " + r.name);
    }
  }
  return depth;
}

}  // namespace detail

inline LoadedRun load_checkpoint(const std::string& path) {
  TensorFile tf = read_tensor_file(path);
  if (tf.kind != FileKind::checkpoint)
    throw FormatError(FormatError::Kind::bad_kind, "not a checkpoint file: " + path);
  if (!tf.extra)
    throw FormatError(FormatError::Kind::bad_record, "checkpoint footer missing: " + path);

  LoadedRun run;
  RunConfig cfg = RunConfig::from_text(tf.extra->config_echo);
  run.pipeline = Pipeline<float>::init(cfg);
  Pipeline<float>& p = run.pipeline;

  // Rebuild towers at their recorded depths; values are overwritten below.
  if (cfg.paradigm == Paradigm::bap) {
    const int dt = detail::recorded_depth(tf, "de_text");
    if (dt == 0)
      throw FormatError(FormatError::Kind::bad_record, "checkpoint lacks text tower records");
    p.de_text = DynamicEncoder<float>::fresh(Modality::text, cfg.embd,
                                             static_cast<int>(cfg.heads), dt,
                                             TowerInit::zero_residual, cfg.seed);
    const int dv = detail::recorded_depth(tf, "de_video");
    if (dv > 0)
      p.de_video = DynamicEncoder<float>::fresh(Modality::video, cfg.embd,
                                                static_cast<int>(cfg.heads), dv,
                                                TowerInit::zero_residual, cfg.seed);
    const int dj = detail::recorded_depth(tf, "jas");
    if (dj > 0)
      p.jas = DynamicEncoder<float>::fresh(Modality::joint, cfg.embd,
                                           static_cast<int>(cfg.heads), dj,
                                           TowerInit::zero_residual, cfg.seed);
  } else {
    const int dj = detail::recorded_depth(tf, "jas");
    if (dj == 0)
      throw FormatError(FormatError::Kind::bad_record, "checkpoint lacks joint tower records");
    p.jas = DynamicEncoder<float>::fresh(Modality::joint, cfg.embd, static_cast<int>(cfg.heads),
                                         dj, TowerInit::zero_residual, cfg.seed);
  }

  std::size_t consumed = 0;
  for (ParamGroup<float>* g : p.groups()) {
    for (auto& [name, var] : g->params) {
      const TensorRecord* rec = tf.find(g->name + "/" + name);
      if (!rec)
        throw FormatError(FormatError::Kind::bad_record,
                          "checkpoint missing record " + g->name + "/" + name);
      if (rec->tensor.shape != var.shape())
        throw FormatError(FormatError::Kind::bad_record,
                          "checkpoint record " + rec->name + " has shape " +
                              shape_str(rec->tensor.shape) + ", expected " +
                              shape_str(var.shape()));
      var.mutable_value() = rec->tensor;
      ++consumed;
      const TensorRecord* vel = tf.find(kMomentumPrefix + g->name + "/" + name);
      if (vel) {
        if (vel->tensor.shape != var.shape())
          throw FormatError(FormatError::Kind::bad_record,
                            "velocity record " + vel->name + " has wrong shape");
        g->velocity[name] = vel->tensor;
        ++consumed;
      }
    }
  }
  if (consumed != tf.records.size())
    throw FormatError(FormatError::Kind::bad_record,
                      "checkpoint holds records that match no parameter");

  run.stage = static_cast<int>(tf.extra->stage);
  if (run.stage < 1 || run.stage > kAllAtOnceStage ||
      (cfg.paradigm == Paradigm::bap) != (run.stage <= 3))
    throw FormatError(FormatError::Kind::bad_record,
                      "checkpoint stage tag inconsistent with its paradigm");
  p.stage = run.stage == kAllAtOnceStage ? 3 : run.stage;
  run.epochs_done = tf.extra->epochs_done;
  run.loss_history = tf.extra->loss_history;
  return run;
}

}  // namespace dfer
