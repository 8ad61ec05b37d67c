// Staged training orchestration: phase recipes, parameter masking, growth
// continuity, bit-exact determinism, checkpointing, and mid-phase resume.

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dfer/dfer.hpp"

namespace fs = std::filesystem;
using namespace dfer;

namespace {

RunConfig tiny_cfg(const std::string& extra = "") {
  KvFile base = KvFile::parse_text(
      "seed = 3\n"
      "classes = 4\nsamples_per_class = 6\nframes = 8\nimage_edge = 16\nnoise = 0.02\n"
      "embd = 16\nenc_layers = 1\nheads = 2\nimage_patch = 8\n"
      "snt = 2\ntkn = 4\n"
      "batch = 8\nepochs1 = 2\nepochs2 = 2\nepochs3 = 1\n"
      "lr1 = 0.05\nlr2 = 0.05\nlr3 = 0.01\n"
      "text_layers = 1\nvideo_layers = 1\njoint_depth = 2\n"
      "growth1 = 2:1\ngrowth2 = 2:1\n");
  for (const auto& [k, v] : KvFile::parse_text(extra).items) {
    bool replaced = false;
    for (auto& [bk, bv] : base.items)
      if (bk == k) {
        bv = v;
        replaced = true;
      }
    if (!replaced) base.items.emplace_back(k, v);
  }
  return RunConfig::from_kv(base);
}

struct Bench {
  RunConfig cfg;
  Dataset data;
  Pipeline<float> p;
  FeatureCache<float> cache;

  explicit Bench(const std::string& extra = "")
      : cfg(tiny_cfg(extra)),
        data(gen_synthetic(cfg.dataset_spec())),
        p(Pipeline<float>::init(cfg)),
        cache(data, p.image_enc, cfg.frames, cfg.image_edge) {}
};

std::string file_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  EXPECT_TRUE(f.is_open()) << path;
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const char* tag) {
  fs::path dir = fs::temp_directory_path() / (std::string("dfer_bap_") + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string hash_of(Pipeline<float>& p, const std::string& group) {
  ParamGroup<float>* g = p.find_group(group);
  EXPECT_NE(g, nullptr) << group;
  return g ? group_sha256(*g) : "";
}

}  // namespace

TEST(StagePlan, PhaseRecipes) {
  const RunConfig cfg = tiny_cfg();
  StagePlan s1 = plan_for_stage(cfg, 1);
  EXPECT_EQ(s1.epochs, 2);
  EXPECT_DOUBLE_EQ(s1.lr, 0.05);
  ASSERT_EQ(s1.growth.size(), 1u);
  EXPECT_EQ(s1.trainable_groups, (std::vector<std::string>{"mat", "de_text"}));

  StagePlan s2 = plan_for_stage(cfg, 2);
  EXPECT_EQ(s2.trainable_groups, (std::vector<std::string>{"de_video"}));

  StagePlan s3 = plan_for_stage(cfg, 3);
  EXPECT_TRUE(s3.growth.empty());
  EXPECT_EQ(s3.trainable_groups, (std::vector<std::string>{"mat", "jas"}));
  EXPECT_DOUBLE_EQ(s3.lr, 0.01);

  StagePlan s4 = plan_for_stage(cfg, kAllAtOnceStage);
  EXPECT_EQ(s4.epochs, 5);  // whole staged budget in one phase
  EXPECT_DOUBLE_EQ(s4.lr, cfg.lr1);
  EXPECT_EQ(s4.trainable_groups, (std::vector<std::string>{"mat", "jas"}));

  EXPECT_THROW(plan_for_stage(cfg, 0), ConfigError);
  EXPECT_THROW(plan_for_stage(cfg, 5), ConfigError);
}

TEST(StageMasking, OnlyScheduledGroupsMove) {
  Bench b;
  std::vector<double> hist;
  const std::string enc_t0 = hash_of(b.p, "enc_text");
  const std::string enc_i0 = hash_of(b.p, "enc_image");
  const std::string mat0 = hash_of(b.p, "mat");
  const std::string text0 = hash_of(b.p, "de_text");

  run_one_stage(b.p, 1, 0, 0, b.data, b.cache, hist);
  EXPECT_EQ(hash_of(b.p, "enc_text"), enc_t0);
  EXPECT_EQ(hash_of(b.p, "enc_image"), enc_i0);
  EXPECT_NE(hash_of(b.p, "mat"), mat0);
  EXPECT_NE(hash_of(b.p, "de_text"), text0);

  const std::string mat1 = hash_of(b.p, "mat");
  const std::string text1 = hash_of(b.p, "de_text");
  run_one_stage(b.p, 2, 0, 0, b.data, b.cache, hist);
  EXPECT_EQ(hash_of(b.p, "mat"), mat1) << "token bank must sit still while the video tower trains";
  EXPECT_EQ(hash_of(b.p, "de_text"), text1);
  EXPECT_EQ(hash_of(b.p, "enc_text"), enc_t0);
  EXPECT_EQ(hash_of(b.p, "enc_image"), enc_i0);
  ASSERT_TRUE(b.p.de_video.has_value());

  const std::string video2 = hash_of(b.p, "de_video");
  run_one_stage(b.p, 3, 0, 0, b.data, b.cache, hist);
  EXPECT_NE(hash_of(b.p, "mat"), mat1) << "joint phase trains the token bank again";
  EXPECT_EQ(hash_of(b.p, "de_text"), text1);
  EXPECT_EQ(hash_of(b.p, "de_video"), video2);
  EXPECT_EQ(hash_of(b.p, "enc_text"), enc_t0);
  EXPECT_EQ(hash_of(b.p, "enc_image"), enc_i0);
  ASSERT_TRUE(b.p.jas.has_value());
}

TEST(StageMasking, LockedEncodersCannotBeWoken) {
  Bench b;
  EXPECT_THROW(b.p.text_enc.params.set_trainable(true), StateError);
  EXPECT_THROW(b.p.image_enc.params.set_trainable(true), StateError);
}

TEST(Training, LossDecreasesInStageOne) {
  Bench b("epochs1 = 4\ngrowth1 = \n");
  std::vector<double> hist;
  TrainReport r = run_one_stage(b.p, 1, 0, 0, b.data, b.cache, hist);
  ASSERT_EQ(r.rows.size(), 4u);
  EXPECT_LT(r.rows.back().mean_loss, r.rows.front().mean_loss);
  EXPECT_EQ(hist.size(), 4u);
  EXPECT_EQ(hist.back(), r.rows.back().mean_loss);
}

TEST(Training, ReportCoversWholeScheduleAndSerializes) {
  Bench b;
  std::vector<double> hist;
  TrainReport r = run_all(b.p, b.data, b.cache, hist);
  ASSERT_EQ(r.rows.size(), 5u);  // 2 + 2 + 1
  EXPECT_EQ(r.rows[0].stage, 1);
  EXPECT_EQ(r.rows[1].stage, 1);
  EXPECT_EQ(r.rows[2].stage, 2);
  EXPECT_EQ(r.rows[3].stage, 2);
  EXPECT_EQ(r.rows[4].stage, 3);
  EXPECT_EQ(r.rows[2].epoch, 1);  // epoch numbering restarts per phase
  EXPECT_GT(r.seconds, 0.0);
  EXPECT_EQ(hist.size(), 5u);
  for (const EpochRow& row : r.rows) {
    EXPECT_TRUE(std::isfinite(row.mean_loss));
    EXPECT_GE(row.train_war, 0.0);
    EXPECT_LE(row.train_war, 1.0);
  }

  const std::string csv = train_report_csv(r);
  EXPECT_EQ(csv.rfind("stage,epoch,mean_loss,train_war\n", 0), 0u);
  EXPECT_NE(csv.find("\n1,1,"), std::string::npos);
  EXPECT_NE(csv.find("\n3,1,"), std::string::npos);
  EXPECT_NE(csv.find("# wall_seconds,"), std::string::npos);
}

// Zero-residual growth must leave the end-to-end decision function
// untouched at the moment it fires, in both phases that grow.
TEST(Growth, LogitsContinuousAcrossGrowthEvents) {
  Bench b;
  std::vector<double> hist;
  std::vector<std::vector<double>> before, after;
  int events = 0;
  TrainHooks hooks;
  hooks.pre_growth = [&](int, std::int64_t) { before = sample_logits(b.p, b.cache, b.data, 4); };
  hooks.post_growth = [&](int, std::int64_t) {
    after = sample_logits(b.p, b.cache, b.data, 4);
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      ASSERT_EQ(before[i].size(), after[i].size());
      for (std::size_t c = 0; c < before[i].size(); ++c)
        EXPECT_EQ(before[i][c], after[i][c]) << "sample " << i << " class " << c;
    }
    ++events;
  };
  run_all(b.p, b.data, b.cache, hist, &hooks);
  EXPECT_EQ(events, 2);  // one growth in the text phase, one in the video phase
  EXPECT_EQ(b.p.de_text->depth(), 2);
  EXPECT_EQ(b.p.de_video->depth(), 2);
}

TEST(Determinism, IdenticalSeedsGiveBitIdenticalRuns) {
  Bench a, b;
  std::vector<double> ha, hb;
  TrainReport ra = run_all(a.p, a.data, a.cache, ha);
  TrainReport rb = run_all(b.p, b.data, b.cache, hb);
  for (const char* g : {"enc_text", "enc_image", "mat", "de_text", "de_video", "jas"})
    EXPECT_EQ(hash_of(a.p, g), hash_of(b.p, g)) << g;
  ASSERT_EQ(ra.rows.size(), rb.rows.size());
  for (std::size_t i = 0; i < ra.rows.size(); ++i) {
    EXPECT_EQ(ra.rows[i].mean_loss, rb.rows[i].mean_loss) << "row " << i;
    EXPECT_EQ(ra.rows[i].train_war, rb.rows[i].train_war) << "row " << i;
  }
  EXPECT_EQ(ha, hb);
}

TEST(Checkpoint, SaveLoadRoundTripsEveryByte) {
  const fs::path dir = fresh_dir("roundtrip");
  Bench b;
  std::vector<double> hist;
  run_all(b.p, b.data, b.cache, hist);

  const fs::path ck_a = dir / "a.ckpt";
  save_checkpoint(ck_a.string(), b.p, 1, hist);

  LoadedRun run = load_checkpoint(ck_a.string());
  EXPECT_EQ(run.stage, 3);
  EXPECT_EQ(run.epochs_done, 1);
  EXPECT_EQ(run.loss_history, hist);
  for (const char* g : {"enc_text", "enc_image", "mat", "de_text", "de_video", "jas"})
    EXPECT_EQ(hash_of(run.pipeline, g), hash_of(b.p, g)) << g;
  EXPECT_EQ(run.pipeline.de_text->depth(), b.p.de_text->depth());
  EXPECT_EQ(run.pipeline.jas->depth(), b.p.jas->depth());

  const fs::path ck_b = dir / "b.ckpt";
  save_checkpoint(ck_b.string(), run.pipeline, run.epochs_done, run.loss_history);
  EXPECT_EQ(file_bytes(ck_a), file_bytes(ck_b));
}

TEST(Checkpoint, RejectsForeignAndIncompleteFiles) {
  const fs::path dir = fresh_dir("badkind");
  Bench b;

  TensorFile not_ckpt;
  not_ckpt.kind = FileKind::text_encoder;
  not_ckpt.config = b.cfg.encoder_config();
  not_ckpt.records.push_back({"w", Tensor<float>::zeros(Shape{2, 2})});
  const fs::path enc_path = dir / "enc.bin";
  write_tensor_file(enc_path.string(), not_ckpt);
  EXPECT_THROW(
      try { load_checkpoint(enc_path.string()); } catch (const FormatError& e) {
        EXPECT_EQ(e.kind, FormatError::Kind::bad_kind);
        throw;
      },
      FormatError);

  TensorFile thin;
  thin.kind = FileKind::checkpoint;
  thin.config = b.cfg.encoder_config();
  thin.records.push_back({"mat/tokens", Tensor<float>::zeros(Shape{1})});
  CheckpointExtra extra;
  extra.stage = 1;
  extra.seed = b.cfg.seed;
  extra.config_echo = b.cfg.echo();
  thin.extra = extra;
  const fs::path thin_path = dir / "thin.ckpt";
  write_tensor_file(thin_path.string(), thin);
  EXPECT_THROW(load_checkpoint(thin_path.string()), FormatError);
}

// The hard resume case: stop mid-phase, reload, and let a growth event that
// lies beyond the stop point fire in the resumed leg. Both trajectories must
// agree bit for bit.
TEST(Resume, MidPhaseStopCrossingGrowthIsBitExact) {
  const fs::path dir = fresh_dir("resume_mid");
  std::vector<double> hist_c;
  Bench cont;
  run_one_stage(cont.p, 1, 0, 0, cont.data, cont.cache, hist_c);

  Bench intr;
  std::vector<double> hist_i;
  run_one_stage(intr.p, 1, 0, 1, intr.data, intr.cache, hist_i);
  EXPECT_EQ(intr.p.de_text->depth(), 1) << "growth at epoch 2 must not fire during epoch 1";
  const fs::path ck = dir / "ep1.ckpt";
  save_checkpoint(ck.string(), intr.p, 1, hist_i);

  LoadedRun run = load_checkpoint(ck.string());
  ASSERT_EQ(run.stage, 1);
  ASSERT_EQ(run.epochs_done, 1);
  FeatureCache<float> cache2(intr.data, run.pipeline.image_enc, intr.cfg.frames,
                             intr.cfg.image_edge);
  run_one_stage(run.pipeline, 1, run.epochs_done, 0, intr.data, cache2, run.loss_history);

  for (const char* g : {"enc_text", "enc_image", "mat", "de_text"})
    EXPECT_EQ(hash_of(run.pipeline, g), hash_of(cont.p, g)) << g;
  EXPECT_EQ(run.pipeline.de_text->depth(), 2);
  EXPECT_EQ(run.loss_history, hist_c);
}

TEST(Resume, StageBoundaryHandoffIsBitExact) {
  const fs::path dir = fresh_dir("resume_stage");
  Bench cont;
  std::vector<double> hist_c;
  run_one_stage(cont.p, 1, 0, 0, cont.data, cont.cache, hist_c);
  run_one_stage(cont.p, 2, 0, 0, cont.data, cont.cache, hist_c);

  Bench intr;
  std::vector<double> hist_i;
  run_one_stage(intr.p, 1, 0, 0, intr.data, intr.cache, hist_i);
  const fs::path ck = dir / "s1.ckpt";
  save_checkpoint(ck.string(), intr.p, 2, hist_i);

  LoadedRun run = load_checkpoint(ck.string());
  FeatureCache<float> cache2(intr.data, run.pipeline.image_enc, intr.cfg.frames,
                             intr.cfg.image_edge);
  run_one_stage(run.pipeline, 2, 0, 0, intr.data, cache2, run.loss_history);

  for (const char* g : {"mat", "de_text", "de_video"})
    EXPECT_EQ(hash_of(run.pipeline, g), hash_of(cont.p, g)) << g;
  EXPECT_EQ(run.loss_history, hist_c);
}

TEST(Resume, RejectsNonsenseEpochWindows) {
  Bench b;
  std::vector<double> hist;
  EXPECT_THROW(run_one_stage(b.p, 1, 2, 2, b.data, b.cache, hist), StateError);
  EXPECT_THROW(run_one_stage(b.p, 1, 0, 7, b.data, b.cache, hist), StateError);
  EXPECT_THROW(run_one_stage(b.p, 1, -1, 0, b.data, b.cache, hist), StateError);
  EXPECT_THROW(run_one_stage(b.p, kAllAtOnceStage, 0, 0, b.data, b.cache, hist), StateError)
      << "staged config cannot run the single-phase schedule";
}

TEST(AllAtOnce, TrainsBankAndJointTowerOnFullBudget) {
  Bench b("paradigm = all_at_once\n");
  ASSERT_FALSE(b.p.de_text.has_value());
  ASSERT_FALSE(b.p.de_video.has_value());
  ASSERT_TRUE(b.p.jas.has_value());
  const std::string enc_t0 = hash_of(b.p, "enc_text");
  const std::string mat0 = hash_of(b.p, "mat");
  const std::string jas0 = hash_of(b.p, "jas");

  std::vector<double> hist;
  TrainReport r = run_all(b.p, b.data, b.cache, hist);
  ASSERT_EQ(r.rows.size(), 5u);
  for (const EpochRow& row : r.rows) EXPECT_EQ(row.stage, kAllAtOnceStage);
  EXPECT_EQ(hash_of(b.p, "enc_text"), enc_t0);
  EXPECT_NE(hash_of(b.p, "mat"), mat0);
  EXPECT_NE(hash_of(b.p, "jas"), jas0);

  const fs::path dir = fresh_dir("aao");
  const fs::path ck = dir / "aao.ckpt";
  save_checkpoint(ck.string(), b.p, 5, hist);
  LoadedRun run = load_checkpoint(ck.string());
  EXPECT_EQ(run.stage, kAllAtOnceStage);
  EXPECT_EQ(hash_of(run.pipeline, "jas"), hash_of(b.p, "jas"));

  std::vector<double> hist2;
  Bench b2("paradigm = all_at_once\n");
  EXPECT_THROW(run_one_stage(b2.p, 1, 0, 0, b2.data, b2.cache, hist2), StateError)
      << "single-phase config cannot run the staged schedule";
}

TEST(Evaluate, GuardsCacheDatasetPairing) {
  Bench b;
  SplitDataset sp = split_2to1(b.data);
  FeatureCache<float> train_cache(sp.train, b.p.image_enc, b.cfg.frames, b.cfg.image_edge);
  b.p.stage = 1;
  EXPECT_THROW(evaluate(b.p, train_cache, sp.test), StateError);
  EXPECT_NO_THROW(evaluate(b.p, train_cache, sp.train));
}

TEST(Evaluate, UntrainedPipelineHasNoFeaturePath) {
  Bench b;
  ASSERT_EQ(b.p.stage, 0);
  EXPECT_THROW(evaluate(b.p, b.cache, b.data), StateError);
}
