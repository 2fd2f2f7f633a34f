#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "ttpk/puppet.hpp"

using namespace ttpk;

namespace {

double joint_dist(const std::array<double, 2>& a, const std::array<double, 2>& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

bool specs_equal(const SubjectSpec& a, const SubjectSpec& b) {
  if (a.torso_scale != b.torso_scale || a.background_style != b.background_style) return false;
  for (int i = 0; i < puppet::kNumLimbs; ++i) {
    if (a.limb_widths[i] != b.limb_widths[i]) return false;
    for (int c = 0; c < 3; ++c)
      if (a.limb_colors[i][c] != b.limb_colors[i][c]) return false;
  }
  return true;
}

}  // namespace

TEST(SampleSubject, DeterministicAndDistinct) {
  EXPECT_TRUE(specs_equal(sample_subject(42), sample_subject(42)));

  std::set<std::string> color_sets;
  for (int seed = 0; seed < 100; ++seed) {
    SubjectSpec s = sample_subject(seed);
    std::string key;
    for (const auto& c : s.limb_colors)
      for (double v : c) key += std::to_string(v) + ",";
    color_sets.insert(key);
    EXPECT_GE(s.torso_scale, 0.7);
    EXPECT_LE(s.torso_scale, 1.3);
  }
  EXPECT_GE(color_sets.size(), 95u);
}

TEST(SamplePose, AnglesWithinLimits) {
  SubjectSpec s = sample_subject(1);
  Rng rng(5);
  const auto& lim = puppet::angle_limits();
  for (int i = 0; i < 1000; ++i) {
    PoseSample p = sample_pose(s, rng);
    for (int a = 0; a < puppet::kNumAngles; ++a) {
      EXPECT_GE(p.joint_angles[a], lim[a].first);
      EXPECT_LE(p.joint_angles[a], lim[a].second);
    }
  }
}

TEST(SamplePose, ZeroDeltaSequentialIsIdentical) {
  SubjectSpec s = sample_subject(2);
  Rng rng(9);
  PoseSample p0 = sample_pose(s, rng);
  PoseSample p1 = step_pose(p0, 0.0, 0.0, rng);
  for (int a = 0; a < puppet::kNumAngles; ++a)
    EXPECT_DOUBLE_EQ(p0.joint_angles[a], p1.joint_angles[a]);
  EXPECT_DOUBLE_EQ(p0.root_position[0], p1.root_position[0]);
  EXPECT_DOUBLE_EQ(p0.root_position[1], p1.root_position[1]);
}

TEST(SamplePose, SequentialDisplacementBelowKinematicBound) {
  // Each joint sits at the end of a chain of at most 3 segments (torso
  // counts for arm/head chains). A per-angle step bound delta gives
  // |dp| <= root_step*size + s*sum(L_i * cumulative-angle-change).
  SubjectSpec subj = sample_subject(3);
  Rng rng(13);
  const int size = 64;
  const double delta = 0.1, root_delta = 0.004;
  PoseSample prev = sample_pose(subj, rng);
  prev.global_scale = 1.0;
  const double s = subj.torso_scale * prev.global_scale * size;
  using namespace puppet;
  // longest lever: neck chain + upper arm + forearm, each angle step <= delta,
  // cumulative angles along a 2-link chain contribute (1+2)*L style terms.
  const double arm_bound = s * (kBaseTorso * delta + kUpperArm * 2 * delta + kForearm * 4 * delta);
  const double bound = root_delta * size + arm_bound + 1e-9;
  for (int step = 0; step < 200; ++step) {
    PoseSample next = step_pose(prev, delta, root_delta, rng);
    next.global_scale = prev.global_scale;
    const auto ja = forward_kinematics(subj, prev, size);
    const auto jb = forward_kinematics(subj, next, size);
    for (int j = 0; j < kNumJoints; ++j) EXPECT_LE(joint_dist(ja[j], jb[j]), bound);
    prev = next;
  }
}

TEST(RenderFrame, DeterministicBitwise) {
  SubjectSpec s = sample_subject(7);
  Rng rng(3);
  PoseSample p = sample_pose(s, rng);
  Frame a = render_frame(s, p, 64);
  Frame b = render_frame(s, p, 64);
  ASSERT_EQ(a.image.numel(), b.image.numel());
  for (std::int64_t i = 0; i < a.image.numel(); ++i) EXPECT_EQ(a.image[i], b.image[i]);
}

TEST(RenderFrame, TorsoLengthMatchesSpec) {
  SubjectSpec s = sample_subject(11);
  PoseSample p;  // defaults: centered, global_scale 1, zero angles
  Frame f = render_frame(s, p, 64);
  const double d = joint_dist(f.gt_joints.points[puppet::kTorsoA],
                              f.gt_joints.points[puppet::kTorsoB]);
  EXPECT_NEAR(d, s.torso_scale * puppet::kBaseTorso * 64.0, 0.5);
}

TEST(RenderFrame, GtMatchesForwardKinematics) {
  SubjectSpec s = sample_subject(12);
  Rng rng(21);
  for (int i = 0; i < 20; ++i) {
    PoseSample p = sample_pose(s, rng);
    if (!pose_in_bounds(s, p, 64)) continue;
    Frame f = render_frame(s, p, 64, 11);
    const auto fk = forward_kinematics(s, p, 64);
    const auto& order = puppet::supervised_order();
    for (int k = 0; k < 11; ++k)
      EXPECT_LT(joint_dist(f.gt_joints.points[k], fk[order[k]]), 0.5);
  }
}

TEST(RenderFrame, BackgroundRegionMatchesStyleExactly) {
  for (int seed : {30, 31, 32, 33, 34, 35}) {
    SubjectSpec s = sample_subject(seed);
    PoseSample p;
    Frame f = render_frame(s, p, 64);
    Tensor bg({3, 64, 64});
    fill_background(s, 64, bg);
    // far corner is limb-free for a centered default pose
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        for (int c = 0; c < 3; ++c) EXPECT_EQ(f.image.at3(c, y, x), bg.at3(c, y, x));
  }
}

TEST(RenderFrame, OutOfBoundsSignalsRegeneration) {
  SubjectSpec s = sample_subject(13);
  PoseSample p;
  p.root_position = {0.02, 0.5};
  EXPECT_THROW(render_frame(s, p, 64), RegenerateSignal);
}

TEST(BuildDataset, CountsAndDeterminism) {
  PoolConfig cfg;
  cfg.n_subjects = 3;
  cfg.frames_per_subject = 5;
  cfg.image_size = 48;
  auto ds = build_dataset(cfg, 0);
  ASSERT_EQ(ds.size(), 3u);
  for (const auto& sd : ds) {
    EXPECT_EQ(sd.frames.size(), 5u);
    for (std::size_t i = 0; i < sd.frames.size(); ++i) {
      EXPECT_EQ(sd.frames[i].subject_id, sd.subject.subject_id);
      EXPECT_EQ(sd.frames[i].frame_index, static_cast<int>(i));
    }
  }
  auto ds2 = build_dataset(cfg, 0);
  for (std::size_t s = 0; s < ds.size(); ++s)
    for (std::size_t f = 0; f < ds[s].frames.size(); ++f)
      for (std::int64_t i = 0; i < ds[s].frames[f].image.numel(); ++i)
        ASSERT_EQ(ds[s].frames[f].image[i], ds2[s].frames[f].image[i]);
}

TEST(BuildDataset, TrainTestPoolsDisjoint) {
  PoolConfig train;
  train.n_subjects = 4;
  train.frames_per_subject = 2;
  train.first_subject_id = 0;
  PoolConfig test = train;
  test.n_subjects = 2;
  test.first_subject_id = 4;
  test.hue_lo = 0.55;
  test.hue_hi = 0.95;
  auto tr = build_dataset(train, 0);
  auto te = build_dataset(test, 0);
  std::set<int> train_ids, test_ids;
  for (const auto& d : tr) train_ids.insert(d.subject.subject_id);
  for (const auto& d : te) test_ids.insert(d.subject.subject_id);
  for (int id : test_ids) EXPECT_EQ(train_ids.count(id), 0u);
}

TEST(BuildDataset, SequentialSmootherThanUnordered) {
  PoolConfig seq;
  seq.n_subjects = 2;
  seq.frames_per_subject = 20;
  seq.mode = SampleMode::kSequential;
  PoolConfig unord = seq;
  unord.mode = SampleMode::kUnordered;
  auto a = build_dataset(seq, 0);
  auto b = build_dataset(unord, 0);
  auto mean_disp = [](const std::vector<SubjectDataset>& ds) {
    double total = 0.0;
    int count = 0;
    for (const auto& sd : ds)
      for (std::size_t f = 1; f < sd.frames.size(); ++f) {
        for (std::size_t j = 0; j < sd.frames[f].gt_joints.points.size(); ++j) {
          total += std::hypot(
              sd.frames[f].gt_joints.points[j][0] - sd.frames[f - 1].gt_joints.points[j][0],
              sd.frames[f].gt_joints.points[j][1] - sd.frames[f - 1].gt_joints.points[j][1]);
          ++count;
        }
      }
    return total / count;
  };
  EXPECT_LT(mean_disp(a), mean_disp(b));
}

TEST(DatasetIo, RoundTripLossless) {
  namespace fs = std::filesystem;
  PoolConfig cfg;
  cfg.n_subjects = 2;
  cfg.frames_per_subject = 3;
  cfg.image_size = 48;
  auto ds = build_dataset(cfg, 5);
  const fs::path dir = fs::temp_directory_path() / "ttpk_ds_roundtrip";
  fs::remove_all(dir);
  save_dataset(ds, dir.string());
  auto back = load_dataset(dir.string());
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t s = 0; s < ds.size(); ++s) {
    ASSERT_EQ(back[s].frames.size(), ds[s].frames.size());
    EXPECT_TRUE(specs_equal(back[s].subject, ds[s].subject));
    for (std::size_t f = 0; f < ds[s].frames.size(); ++f) {
      for (std::int64_t i = 0; i < ds[s].frames[f].image.numel(); ++i)
        ASSERT_EQ(back[s].frames[f].image[i], ds[s].frames[f].image[i]);
      for (std::size_t j = 0; j < ds[s].frames[f].gt_joints.points.size(); ++j) {
        EXPECT_EQ(back[s].frames[f].gt_joints.points[j][0], ds[s].frames[f].gt_joints.points[j][0]);
        EXPECT_EQ(back[s].frames[f].gt_joints.points[j][1], ds[s].frames[f].gt_joints.points[j][1]);
      }
    }
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, TruncatedFrameFileFailsNamingFile) {
  namespace fs = std::filesystem;
  PoolConfig cfg;
  cfg.n_subjects = 1;
  cfg.frames_per_subject = 2;
  cfg.image_size = 48;
  auto ds = build_dataset(cfg, 6);
  const fs::path dir = fs::temp_directory_path() / "ttpk_ds_trunc";
  fs::remove_all(dir);
  save_dataset(ds, dir.string());
  const fs::path victim = dir / "frames" / "0" / "1.bin";
  fs::resize_file(victim, 100);
  try {
    load_dataset(dir.string());
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("1.bin"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, ManifestCountMismatchFails) {
  namespace fs = std::filesystem;
  PoolConfig cfg;
  cfg.n_subjects = 1;
  cfg.frames_per_subject = 2;
  cfg.image_size = 48;
  auto ds = build_dataset(cfg, 7);
  const fs::path dir = fs::temp_directory_path() / "ttpk_ds_mismatch";
  fs::remove_all(dir);
  save_dataset(ds, dir.string());
  // claim 3 frames while only 2 exist
  std::ifstream in(dir / "manifest.json");
  nlohmann::json m;
  in >> m;
  in.close();
  m["subjects"][0]["n_frames"] = 3;
  std::ofstream out(dir / "manifest.json");
  out << m.dump();
  out.close();
  EXPECT_THROW(load_dataset(dir.string()), IoError);
  fs::remove_all(dir);
}
