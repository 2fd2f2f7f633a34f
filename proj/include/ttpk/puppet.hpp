#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttpk/tensor.hpp"

namespace ttpk {

// ---------------------------------------------------------------------------
// Articulated stick figure ("puppet"): 11 joints, 10 capsule limbs plus a
// head disc. All lengths are fractions of the image size.
// ---------------------------------------------------------------------------

namespace puppet {

enum Joint {
  kPelvis = 0,
  kNeck,
  kHead,
  kElbowL,
  kHandL,
  kElbowR,
  kHandR,
  kKneeL,
  kFootL,
  kKneeR,
  kFootR,
  kNumJoints
};

// Supervised readout order; k_sup takes a prefix of this list. Neck and
// pelvis land at indices 1 and 2, which the PCK torso pair relies on.
inline const std::array<Joint, 11>& supervised_order() {
  static const std::array<Joint, 11> order = {kHead,  kNeck,  kPelvis, kHandL, kHandR, kFootR,
                                              kFootL, kElbowL, kElbowR, kKneeL, kKneeR};
  return order;
}
constexpr int kTorsoA = 1;  // neck, in supervised order
constexpr int kTorsoB = 2;  // pelvis

constexpr double kBaseTorso = 0.22;
constexpr double kHeadOffset = 0.085;
constexpr double kHeadRadius = 0.05;
constexpr double kUpperArm = 0.11;
constexpr double kForearm = 0.11;
constexpr double kThigh = 0.13;
constexpr double kShin = 0.13;

enum Angle {
  kLean = 0,   // torso from vertical
  kTilt,       // head relative to torso
  kShoulderL,  // arms from straight down
  kElbowLA,
  kShoulderR,
  kElbowRA,
  kHipL,  // legs from straight down
  kKneeLA,
  kHipR,
  kKneeRA,
  kNumAngles
};

inline const std::array<std::pair<double, double>, kNumAngles>& angle_limits() {
  static const std::array<std::pair<double, double>, kNumAngles> lim = {{
      {-0.30, 0.30},  // lean
      {-0.40, 0.40},  // tilt
      {-2.40, 2.40},  // shoulder L
      {-2.20, 2.20},  // elbow L
      {-2.40, 2.40},  // shoulder R
      {-2.20, 2.20},  // elbow R
      {-0.90, 0.90},  // hip L
      {0.00, 2.00},   // knee L (no hyperextension)
      {-0.90, 0.90},  // hip R
      {0.00, 2.00},   // knee R
  }};
  return lim;
}

// Limbs drawn back to front; last entry is the head disc.
enum Limb {
  kLimbThighL = 0,
  kLimbShinL,
  kLimbThighR,
  kLimbShinR,
  kLimbUpperArmL,
  kLimbForearmL,
  kLimbUpperArmR,
  kLimbForearmR,
  kLimbTorso,
  kLimbHeadNeck,
  kLimbHeadDisc,
  kNumLimbs
};

inline const std::array<std::pair<Joint, Joint>, 10>& limb_segments() {
  static const std::array<std::pair<Joint, Joint>, 10> segs = {{
      {kPelvis, kKneeL},
      {kKneeL, kFootL},
      {kPelvis, kKneeR},
      {kKneeR, kFootR},
      {kNeck, kElbowL},
      {kElbowL, kHandL},
      {kNeck, kElbowR},
      {kElbowR, kHandR},
      {kPelvis, kNeck},
      {kNeck, kHead},
  }};
  return segs;
}

}  // namespace puppet

enum class BackgroundStyle { kFlat = 0, kGradient = 1, kNoise = 2 };

struct SubjectSpec {
  int subject_id = 0;
  std::uint64_t appearance_seed = 0;
  double hue_lo = 0.0, hue_hi = 0.45;  // limb hue range this subject drew from
  std::array<std::array<double, 3>, puppet::kNumLimbs> limb_colors{};
  std::array<double, puppet::kNumLimbs> limb_widths{};  // fraction of image size
  double torso_scale = 1.0;
  BackgroundStyle background_style = BackgroundStyle::kFlat;
  std::array<double, 3> bg_color_a{}, bg_color_b{};
};

struct PoseSample {
  std::array<double, puppet::kNumAngles> joint_angles{};
  std::array<double, 2> root_position{0.5, 0.52};  // normalized (y,x)
  double global_scale = 1.0;
};

// Plain keypoints: (y,x) rows plus per-point confidence.
struct KeypointSet {
  std::vector<std::array<double, 2>> points;
  std::vector<double> confidence;
};

struct Frame {
  Tensor image;  // (3,H,W) in [0,1]
  KeypointSet gt_joints;  // k_sup joints, image pixel coords
  int subject_id = 0;
  int frame_index = 0;
};

enum class SampleMode { kSequential = 0, kUnordered = 1 };

struct SubjectDataset {
  SubjectSpec subject;
  SampleMode mode = SampleMode::kUnordered;
  std::vector<Frame> frames;
};

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

inline std::uint32_t hash32(std::uint32_t a, std::uint32_t b, std::uint32_t c) {
  std::uint64_t x = (static_cast<std::uint64_t>(a) << 32) ^ (static_cast<std::uint64_t>(b) << 16) ^ c;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return static_cast<std::uint32_t>(x);
}

// Smooth value noise in [0,1] on an 8x8 lattice.
inline double value_noise(std::uint32_t seed, double u, double v) {
  const double gu = u * 8.0, gv = v * 8.0;
  const int iu = static_cast<int>(std::floor(gu)), iv = static_cast<int>(std::floor(gv));
  const double fu = gu - iu, fv = gv - iv;
  auto lattice = [&](int x, int y) {
    return static_cast<double>(hash32(seed, static_cast<std::uint32_t>(x),
                                      static_cast<std::uint32_t>(y))) /
           4294967295.0;
  };
  const double a = lattice(iu, iv), b = lattice(iu + 1, iv);
  const double c = lattice(iu, iv + 1), d = lattice(iu + 1, iv + 1);
  const double su = fu * fu * (3 - 2 * fu), sv = fv * fv * (3 - 2 * fv);
  return (a * (1 - su) + b * su) * (1 - sv) + (c * (1 - su) + d * su) * sv;
}

inline double dist_point_segment(double py, double px, double ay, double ax, double by,
                                 double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double wy = py - ay, wx = px - ax;
  const double vv = vy * vy + vx * vx;
  double t = vv > 0.0 ? (wy * vy + wx * vx) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = py - (ay + t * vy), dx = px - (ax + t * vx);
  return std::sqrt(dy * dy + dx * dx);
}

}  // namespace detail

// Deterministic subject appearance. Distinct seeds give distinct looks;
// the hue window realizes the train/test appearance shift.
inline SubjectSpec sample_subject(std::uint64_t seed, double hue_lo = 0.0, double hue_hi = 0.45) {
  Rng rng(seed, 77);
  SubjectSpec s;
  s.appearance_seed = seed;
  s.hue_lo = hue_lo;
  s.hue_hi = hue_hi;
  for (int i = 0; i < puppet::kNumLimbs; ++i) {
    const double hue = rng.uniform(hue_lo, hue_hi);
    s.limb_colors[i] = detail::hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 1.0));
  }
  for (int i = 0; i < puppet::kNumLimbs; ++i) s.limb_widths[i] = rng.uniform(0.030, 0.042);
  s.limb_widths[puppet::kLimbTorso] = rng.uniform(0.055, 0.075);
  s.limb_widths[puppet::kLimbHeadDisc] = puppet::kHeadRadius;
  s.torso_scale = rng.uniform(0.8, 1.2);
  const int styles = 3;
  s.background_style = static_cast<BackgroundStyle>(rng.below(styles));
  // muted backgrounds so the figure stays the dominant signal
  const double bg_hue = rng.uniform(0.0, 1.0);
  s.bg_color_a = detail::hsv_to_rgb(bg_hue, rng.uniform(0.0, 0.25), rng.uniform(0.08, 0.30));
  s.bg_color_b = detail::hsv_to_rgb(bg_hue + 0.08, rng.uniform(0.0, 0.25), rng.uniform(0.08, 0.30));
  return s;
}

inline PoseSample sample_pose(const SubjectSpec&, Rng& rng) {
  PoseSample p;
  const auto& lim = puppet::angle_limits();
  for (int i = 0; i < puppet::kNumAngles; ++i)
    p.joint_angles[i] = rng.uniform(lim[i].first, lim[i].second);
  p.root_position = {0.52 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.05, 0.05)};
  p.global_scale = rng.uniform(0.9, 1.1);
  return p;
}

// Random walk in pose space with per-angle step bound; keeps sequences
// temporally smooth for the online scenario.
inline PoseSample step_pose(const PoseSample& prev, double max_angle_delta, double max_root_delta,
                            Rng& rng) {
  PoseSample p = prev;
  const auto& lim = puppet::angle_limits();
  for (int i = 0; i < puppet::kNumAngles; ++i) {
    const double d = rng.uniform(-max_angle_delta, max_angle_delta);
    p.joint_angles[i] = std::clamp(prev.joint_angles[i] + d, lim[i].first, lim[i].second);
  }
  for (int i = 0; i < 2; ++i)
    p.root_position[i] =
        std::clamp(prev.root_position[i] + rng.uniform(-max_root_delta, max_root_delta), 0.35, 0.65);
  return p;
}

// Forward kinematics: all 11 joints in image pixel coords (y,x).
inline std::array<std::array<double, 2>, puppet::kNumJoints> forward_kinematics(
    const SubjectSpec& subject, const PoseSample& pose, int size) {
  using namespace puppet;
  const double s = subject.torso_scale * pose.global_scale * size;
  const auto& a = pose.joint_angles;
  std::array<std::array<double, 2>, kNumJoints> j{};
  // dir_down(ang): unit (y,x) vector `ang` radians off straight down (+y)
  const auto dir_down = [](double ang) {
    return std::array<double, 2>{std::cos(ang), std::sin(ang)};
  };
  j[kPelvis] = {pose.root_position[0] * size, pose.root_position[1] * size};
  // torso points up: angle measured from straight up (-y)
  j[kNeck] = {j[kPelvis][0] - kBaseTorso * s * std::cos(a[kLean]),
              j[kPelvis][1] + kBaseTorso * s * std::sin(a[kLean])};
  j[kHead] = {j[kNeck][0] - kHeadOffset * s * std::cos(a[kLean] + a[kTilt]),
              j[kNeck][1] + kHeadOffset * s * std::sin(a[kLean] + a[kTilt])};
  auto chain = [&](Joint root, double len1, double ang1, Joint mid, double len2, double ang2,
                   Joint end) {
    const auto d1 = dir_down(ang1);
    j[mid] = {j[root][0] + len1 * s * d1[0], j[root][1] + len1 * s * d1[1]};
    const auto d2 = dir_down(ang1 + ang2);
    j[end] = {j[mid][0] + len2 * s * d2[0], j[mid][1] + len2 * s * d2[1]};
  };
  chain(kNeck, kUpperArm, a[kShoulderL] - 0.35, kElbowL, kForearm, a[kElbowLA], kHandL);
  chain(kNeck, kUpperArm, a[kShoulderR] + 0.35, kElbowR, kForearm, a[kElbowRA], kHandR);
  chain(kPelvis, kThigh, a[kHipL] - 0.18, kKneeL, kShin, a[kKneeLA], kFootL);
  chain(kPelvis, kThigh, a[kHipR] + 0.18, kKneeR, kShin, a[kKneeRA], kFootR);
  return j;
}

// Signals the caller to resample the pose.
struct RegenerateSignal : DataError {
  RegenerateSignal() : DataError("pose out of bounds; resample") {}
};

inline bool pose_in_bounds(const SubjectSpec& subject, const PoseSample& pose, int size,
                           double margin = 2.0) {
  const auto joints = forward_kinematics(subject, pose, size);
  for (const auto& p : joints)
    if (p[0] < margin || p[0] > size - 1 - margin || p[1] < margin || p[1] > size - 1 - margin)
      return false;
  return true;
}

inline void fill_background(const SubjectSpec& subject, int size, Tensor& img) {
  const std::uint32_t nseed = static_cast<std::uint32_t>(subject.appearance_seed * 2654435761ULL);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<double, 3> c{};
      switch (subject.background_style) {
        case BackgroundStyle::kFlat:
          c = subject.bg_color_a;
          break;
        case BackgroundStyle::kGradient: {
          const double t = (y + x) / (2.0 * (size - 1));
          for (int ch = 0; ch < 3; ++ch)
            c[ch] = (1 - t) * subject.bg_color_a[ch] + t * subject.bg_color_b[ch];
          break;
        }
        case BackgroundStyle::kNoise: {
          const double t = detail::value_noise(nseed, x / static_cast<double>(size),
                                               y / static_cast<double>(size));
          for (int ch = 0; ch < 3; ++ch)
            c[ch] = (1 - t) * subject.bg_color_a[ch] + t * subject.bg_color_b[ch];
          break;
        }
      }
      for (int ch = 0; ch < 3; ++ch) img.at3(ch, y, x) = c[ch];
    }
  }
}

// Renders anti-aliased capsule limbs over the subject background and reads
// out ground-truth joints for the first k_sup entries of supervised order.
inline Frame render_frame(const SubjectSpec& subject, const PoseSample& pose, int size,
                          int k_sup = 6) {
  using namespace puppet;
  if (size < 32) throw ArgumentError("render_frame: size must be >= 32");
  if (k_sup < 3 || k_sup > kNumJoints)
    throw ArgumentError("render_frame: k_sup must be in [3, 11]");
  if (!pose_in_bounds(subject, pose, size)) throw RegenerateSignal();

  const auto joints = forward_kinematics(subject, pose, size);
  Frame f;
  f.subject_id = subject.subject_id;
  f.image = Tensor({3, size, size});
  fill_background(subject, size, f.image);

  const double ws = subject.torso_scale * pose.global_scale * size;
  auto paint_capsule = [&](double ay, double ax, double by, double bx, double half_w,
                           const std::array<double, 3>& col) {
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - half_w - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ay, by) + half_w + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - half_w - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ax, bx) + half_w + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d = detail::dist_point_segment(y, x, ay, ax, by, bx);
        const double alpha = std::clamp(half_w + 0.5 - d, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        for (int ch = 0; ch < 3; ++ch)
          f.image.at3(ch, y, x) = alpha * col[ch] + (1 - alpha) * f.image.at3(ch, y, x);
      }
  };

  const auto& segs = limb_segments();
  for (int li = 0; li < 10; ++li) {
    const auto [ja, jb] = segs[li];
    paint_capsule(joints[ja][0], joints[ja][1], joints[jb][0], joints[jb][1],
                  0.5 * subject.limb_widths[li] * ws, subject.limb_colors[li]);
  }
  // head disc: zero-length capsule
  paint_capsule(joints[kHead][0], joints[kHead][1], joints[kHead][0], joints[kHead][1],
                subject.limb_widths[kLimbHeadDisc] * ws, subject.limb_colors[kLimbHeadDisc]);

  const auto& order = supervised_order();
  f.gt_joints.points.resize(static_cast<std::size_t>(k_sup));
  f.gt_joints.confidence.assign(static_cast<std::size_t>(k_sup), 1.0);
  for (int i = 0; i < k_sup; ++i) f.gt_joints.points[i] = joints[order[i]];
  return f;
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

struct PoolConfig {
  int n_subjects = 8;
  int frames_per_subject = 50;
  int image_size = 64;
  int k_sup = 6;
  SampleMode mode = SampleMode::kUnordered;
  double hue_lo = 0.0, hue_hi = 0.45;
  double max_angle_delta = 0.12;   // sequential mode step bound (radians)
  double max_root_delta = 0.004;   // sequential mode root step (normalized)
  int first_subject_id = 0;
};

inline std::vector<SubjectDataset> build_dataset(const PoolConfig& cfg, std::uint64_t seed) {
  if (cfg.n_subjects < 1) throw ArgumentError("build_dataset: n_subjects must be >= 1");
  std::vector<SubjectDataset> out;
  out.reserve(static_cast<std::size_t>(cfg.n_subjects));
  for (int si = 0; si < cfg.n_subjects; ++si) {
    const int subject_id = cfg.first_subject_id + si;
    const std::uint64_t subj_seed = seed * 1000003ULL + static_cast<std::uint64_t>(subject_id);
    SubjectDataset ds;
    ds.subject = sample_subject(subj_seed, cfg.hue_lo, cfg.hue_hi);
    ds.subject.subject_id = subject_id;
    ds.mode = cfg.mode;
    Rng rng(subj_seed, 101);
    PoseSample prev;
    for (int fi = 0; fi < cfg.frames_per_subject; ++fi) {
      PoseSample pose;
      for (int attempt = 0;; ++attempt) {
        if (cfg.mode == SampleMode::kSequential && fi > 0)
          pose = step_pose(prev, cfg.max_angle_delta, cfg.max_root_delta, rng);
        else
          pose = sample_pose(ds.subject, rng);
        if (pose_in_bounds(ds.subject, pose, cfg.image_size)) break;
        if (attempt > 200)
          throw DataError("build_dataset: cannot place subject " + std::to_string(subject_id) +
                          " in bounds");
      }
      Frame f = render_frame(ds.subject, pose, cfg.image_size, cfg.k_sup);
      f.frame_index = fi;
      ds.frames.push_back(std::move(f));
      prev = pose;
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + frames/<subj>/<idx>.bin (raw LE f64) +
// frames/<subj>/<idx>.json (ground-truth joints)
// ---------------------------------------------------------------------------

inline void save_dataset(const std::vector<SubjectDataset>& ds, const std::string& path) {
  namespace fs = std::filesystem;
  fs::create_directories(path);
  nlohmann::json manifest;
  manifest["version"] = 1;
  if (ds.empty()) throw ArgumentError("save_dataset: empty dataset");
  const int size = ds[0].frames.empty() ? 0 : ds[0].frames[0].image.dim(1);
  const int k_sup =
      ds[0].frames.empty() ? 0 : static_cast<int>(ds[0].frames[0].gt_joints.points.size());
  manifest["image_size"] = size;
  manifest["k_sup"] = k_sup;
  manifest["subjects"] = nlohmann::json::array();
  for (const auto& sd : ds) {
    manifest["subjects"].push_back({{"id", sd.subject.subject_id},
                                    {"seed", sd.subject.appearance_seed},
                                    {"n_frames", sd.frames.size()},
                                    {"mode", sd.mode == SampleMode::kSequential ? "sequential"
                                                                                : "unordered"},
                                    {"hue_lo", sd.subject.hue_lo},
                                    {"hue_hi", sd.subject.hue_hi}});
    const fs::path dir = fs::path(path) / "frames" / std::to_string(sd.subject.subject_id);
    fs::create_directories(dir);
    for (const auto& f : sd.frames) {
      const std::string stem = std::to_string(f.frame_index);
      std::ofstream bin(dir / (stem + ".bin"), std::ios::binary);
      if (!bin) throw IoError("cannot write " + (dir / (stem + ".bin")).string());
      bin.write(reinterpret_cast<const char*>(f.image.ptr()),
                static_cast<std::streamsize>(f.image.numel() * 8));
      nlohmann::json gj;
      gj["joints"] = nlohmann::json::array();
      for (const auto& p : f.gt_joints.points) gj["joints"].push_back({{"y", p[0]}, {"x", p[1]}});
      std::ofstream js(dir / (stem + ".json"));
      if (!js) throw IoError("cannot write " + (dir / (stem + ".json")).string());
      js << gj.dump();
    }
  }
  std::ofstream mf(fs::path(path) / "manifest.json");
  if (!mf) throw IoError("cannot write manifest.json under " + path);
  mf << manifest.dump(2) << "\n";
}

inline std::vector<SubjectDataset> load_dataset(const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(path) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("cannot open " + mpath.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw DataError("corrupt manifest " + mpath.string() + ": " + e.what());
  }
  const int size = manifest.at("image_size").get<int>();
  const int k_sup = manifest.at("k_sup").get<int>();
  std::vector<SubjectDataset> out;
  for (const auto& sj : manifest.at("subjects")) {
    SubjectDataset sd;
    const int id = sj.at("id").get<int>();
    const std::uint64_t seed = sj.at("seed").get<std::uint64_t>();
    sd.subject = sample_subject(seed, sj.value("hue_lo", 0.0), sj.value("hue_hi", 0.45));
    sd.subject.subject_id = id;
    sd.mode = sj.at("mode").get<std::string>() == "sequential" ? SampleMode::kSequential
                                                               : SampleMode::kUnordered;
    const int n_frames = sj.at("n_frames").get<int>();
    const fs::path dir = fs::path(path) / "frames" / std::to_string(id);
    for (int fi = 0; fi < n_frames; ++fi) {
      const fs::path bin_path = dir / (std::to_string(fi) + ".bin");
      std::ifstream bin(bin_path, std::ios::binary);
      if (!bin) throw IoError("missing frame file " + bin_path.string());
      Frame f;
      f.subject_id = id;
      f.frame_index = fi;
      f.image = Tensor({3, size, size});
      bin.read(reinterpret_cast<char*>(f.image.ptr()),
               static_cast<std::streamsize>(f.image.numel() * 8));
      if (bin.gcount() != static_cast<std::streamsize>(f.image.numel() * 8))
        throw IoError("truncated frame file " + bin_path.string());
      const fs::path js_path = dir / (std::to_string(fi) + ".json");
      std::ifstream js(js_path);
      if (!js) throw IoError("missing frame file " + js_path.string());
      nlohmann::json gj;
      try {
        js >> gj;
      } catch (const std::exception& e) {
        throw DataError("corrupt gt file " + js_path.string() + ": " + e.what());
      }
      for (const auto& p : gj.at("joints"))
        f.gt_joints.points.push_back({p.at("y").get<double>(), p.at("x").get<double>()});
      f.gt_joints.confidence.assign(f.gt_joints.points.size(), 1.0);
      if (static_cast<int>(f.gt_joints.points.size()) != k_sup)
        throw DataError("gt joint count mismatch in " + js_path.string());
      sd.frames.push_back(std::move(f));
    }
    out.push_back(std::move(sd));
  }
  return out;
}

}  // namespace ttpk
