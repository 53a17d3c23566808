#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "m3l/core/rng.hpp"
#include "m3l/env/geometry.hpp"
#include "m3l/env/shapes.hpp"

namespace m3l::env {

inline constexpr int kImageSize = 64;
inline constexpr int kTaxelSize = 32;
inline constexpr int kChannels = 3;

/// Every physical and rendering constant of the insertion environment. Lengths in
/// meters, forces in newtons.
struct EnvConfig {
  int frame_stack = 4;
  int max_steps = 300;
  double success_threshold = 0.005;
  double success_bonus = 1000.0;
  double max_displacement = 0.01;  // per step, per axis

  double contact_stiffness = 2.0e4;     // frame/floor spring
  double controller_stiffness = 2.0e3;  // position-controlled gripper
  double friction = 0.5;                // Coulomb coefficient, pads and frame
  double grip_force = 5.0;              // per pad, constant
  double peg_mass = 0.05;
  double taxel_force_max = 0.05;        // per-taxel force mapped to 1.0

  double pad_width = 0.032;   // along world y
  double pad_height = 0.032;  // along world z
  double pad_thickness = 0.006;
  double pad_compliance = 0.002;  // silicone indentation depth that still carries load
  double palm_width = 0.016;

  double peg_height = 0.035;
  double peg_top_above_pad = 0.008;  // peg top relative to the pad centre

  double frame_height = 0.02;  // plate surface; the hole goes down to the table
  double insertion_depth = 0.012;
  double hole_clearance = 0.003;
  double frame_border = 0.01;

  double workspace_half_extent = 0.06;
  double gripper_z_max = 0.12;
  double target_range = 0.03;        // target xy drawn from [-r, r]^2
  double init_xy_range = 0.04;       // gripper xy drawn from [-r, r]^2
  double init_peg_bottom_min = 0.04;  // peg bottom height at reset
  double init_peg_bottom_max = 0.06;

  double camera_height = 0.45;
  double view_half_extent = 0.064;  // half width of the table area seen by the camera
  double image_noise_std = 0.0;     // seeded per reset; 0 keeps observations noise-free

  std::vector<std::string> train_shapes;  // restricts the train split; empty = all 18

  double peg_drop() const { return peg_height - peg_top_above_pad; }
  double goal_height() const { return frame_height - insertion_depth; }
};

enum class FrameShape { square, circle };

inline std::string to_string(FrameShape f) { return f == FrameShape::square ? "square" : "circle"; }

struct TaskSpec {
  PegShape peg;
  FrameShape target_frame = FrameShape::square;
  Vec2 target_position;
  Vec3 init_gripper_position;
};

enum class ContactBody { pad_left, pad_right, frame_top, hole_wall, floor };

inline std::string to_string(ContactBody b) {
  switch (b) {
    case ContactBody::pad_left: return "pad_left";
    case ContactBody::pad_right: return "pad_right";
    case ContactBody::frame_top: return "frame_top";
    case ContactBody::hole_wall: return "hole_wall";
    case ContactBody::floor: return "floor";
  }
  return "?";
}

/// A point contact. For pads, `point` is the centre of pressure on the pad surface,
/// `normal_force` the pressing force and `tangential` the shear the peg exerts on the
/// pad. For environment contacts the forces act on the peg.
struct Contact {
  ContactBody body = ContactBody::floor;
  Vec3 point;
  Vec3 normal;
  double normal_force = 0.0;
  Vec3 tangential;
};

enum class DoneReason { none, success, timeout };

inline std::string to_string(DoneReason r) {
  switch (r) {
    case DoneReason::none: return "none";
    case DoneReason::success: return "success";
    case DoneReason::timeout: return "timeout";
  }
  return "?";
}

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;
};

/// Static geometry of the current episode.
struct Scene {
  Polygon peg;
  FrameShape frame = FrameShape::square;
  Vec2 target;
  double hole_half_size = 0.0;  // half side (square) or radius (circle)
  bool has_peg = true;
};

struct EnvState {
  Scene scene;
  Vec3 gripper_position;
  Vec3 gripper_velocity;
  Pose2 peg_pose;
  std::vector<Contact> contacts;
  double distance_to_target = 0.0;
  int step_count = 0;
  DoneReason done_reason = DoneReason::none;
  bool in_hole = false;
};

/// Channels-last float arrays; image rows run top to bottom with world +y up,
/// taxel rows run from the pad top down with columns along world +y.
struct VisuoTactileObs {
  std::vector<float> image;          // 64 x 64 x 3 in [0, 1]
  std::vector<float> tactile_left;   // 32 x 32 x (shear_x, shear_y, pressure)
  std::vector<float> tactile_right;
};

/// k frames concatenated along channels, oldest first.
struct StackedObs {
  int k = 1;
  std::vector<float> image_stack;
  std::vector<float> tactile_left_stack;
  std::vector<float> tactile_right_stack;
};

struct StepInfo {
  double distance = 0.0;
  std::vector<Contact> contacts;
  DoneReason done_reason = DoneReason::none;
};

struct StepResult {
  StackedObs obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

/// -log(100 d + 1).
inline double dense_reward(double d) {
  if (!(d >= 0.0)) throw std::domain_error("dense_reward: distance must be non-negative");
  return -std::log(100.0 * d + 1.0);
}

inline double hole_half_size(const Polygon& peg, FrameShape frame, double clearance) {
  if (frame == FrameShape::circle) return max_radius(peg) + clearance;
  const Box2 b = bounds(peg);
  return std::max({-b.lo.x, b.hi.x, -b.lo.y, b.hi.y}) + clearance;
}

inline Scene make_scene(const TaskSpec& task, const EnvConfig& cfg) {
  return {task.peg.polygon, task.target_frame, task.target_position,
          hole_half_size(task.peg.polygon, task.target_frame, cfg.hole_clearance), true};
}

inline bool inside_hole(const Scene& scene, Vec2 p) {
  const Vec2 r = p - scene.target;
  if (scene.frame == FrameShape::square) {
    return std::abs(r.x) <= scene.hole_half_size && std::abs(r.y) <= scene.hole_half_size;
  }
  return r.norm() <= scene.hole_half_size;
}

/// The peg footprint (at grip offset `e` from the target) fits in the convex hole
/// iff every vertex does.
inline bool footprint_fits(const Scene& scene, Vec2 offset) {
  for (const Vec2& v : scene.peg) {
    if (!inside_hole(scene, scene.target + offset + v)) return false;
  }
  return true;
}

/// Nearest admissible offset (peg fully inside the hole). Exact for square holes;
/// for circular holes cyclic projection onto the per-vertex disks.
inline Vec2 project_into_hole(const Scene& scene, Vec2 offset) {
  if (scene.frame == FrameShape::square) {
    const Box2 b = bounds(scene.peg);
    const double h = scene.hole_half_size;
    return {std::clamp(offset.x, -h - b.lo.x, h - b.hi.x), std::clamp(offset.y, -h - b.lo.y, h - b.hi.y)};
  }
  Vec2 e = offset;
  for (int iter = 0; iter < 64; ++iter) {
    double worst = 0.0;
    Vec2 fix;
    for (const Vec2& v : scene.peg) {
      const Vec2 p = e + v;
      const double excess = p.norm() - scene.hole_half_size;
      if (excess > worst) {
        worst = excess;
        fix = (-excess / p.norm()) * p;
      }
    }
    if (worst <= 1e-12) break;
    e = e + fix;
  }
  return e;
}

struct PadGeometry {
  double face_x = 0.0;  // pad surface x relative to the gripper
  std::array<float, kTaxelSize> column_weight{};
  std::array<float, kTaxelSize> row_weight{};
};

inline double taxel_u(int col, const EnvConfig& cfg) { return -0.5 * cfg.pad_width + (col + 0.5) * cfg.pad_width / kTaxelSize; }
inline double taxel_v(int row, const EnvConfig& cfg) { return 0.5 * cfg.pad_height - (row + 0.5) * cfg.pad_height / kTaxelSize; }

/// Which taxels of a pad touch the peg: columns where the peg's side face lies within
/// the pad compliance of the extreme face, rows within the peg's height span.
inline PadGeometry pad_geometry(const Polygon& peg, bool left, const EnvConfig& cfg) {
  PadGeometry g;
  const Box2 b = bounds(peg);
  g.face_x = left ? b.lo.x : b.hi.x;
  for (int j = 0; j < kTaxelSize; ++j) {
    const auto ext = horizontal_extent(peg, taxel_u(j, cfg));
    if (!ext) continue;
    const double gap = left ? ext->first - b.lo.x : b.hi.x - ext->second;
    g.column_weight[static_cast<std::size_t>(j)] =
        static_cast<float>(std::clamp(1.0 - gap / cfg.pad_compliance, 0.0, 1.0));
  }
  const double top = cfg.peg_top_above_pad;
  const double bottom = -cfg.peg_drop();
  for (int i = 0; i < kTaxelSize; ++i) {
    const double v = taxel_v(i, cfg);
    g.row_weight[static_cast<std::size_t>(i)] = (v <= top && v >= bottom) ? 1.0f : 0.0f;
  }
  return g;
}

struct PatchMoments {
  double weight = 0.0;
  double cu = 0.0;
  double cv = 0.0;
  double juu = 0.0;
  double juv = 0.0;
  double jvv = 0.0;
  double u_lo = 0.0, u_hi = 0.0, v_lo = 0.0, v_hi = 0.0;
};

inline PatchMoments patch_moments(const PadGeometry& g, const EnvConfig& cfg) {
  PatchMoments m;
  m.u_lo = m.v_lo = 1e9;
  m.u_hi = m.v_hi = -1e9;
  for (int i = 0; i < kTaxelSize; ++i) {
    for (int j = 0; j < kTaxelSize; ++j) {
      const double w = g.row_weight[static_cast<std::size_t>(i)] * g.column_weight[static_cast<std::size_t>(j)];
      if (w <= 0.0) continue;
      const double u = taxel_u(j, cfg);
      const double v = taxel_v(i, cfg);
      m.weight += w;
      m.cu += w * u;
      m.cv += w * v;
      m.u_lo = std::min(m.u_lo, u);
      m.u_hi = std::max(m.u_hi, u);
      m.v_lo = std::min(m.v_lo, v);
      m.v_hi = std::max(m.v_hi, v);
    }
  }
  if (m.weight <= 0.0) return m;
  m.cu /= m.weight;
  m.cv /= m.weight;
  for (int i = 0; i < kTaxelSize; ++i) {
    for (int j = 0; j < kTaxelSize; ++j) {
      const double w = g.row_weight[static_cast<std::size_t>(i)] * g.column_weight[static_cast<std::size_t>(j)];
      if (w <= 0.0) continue;
      const double du = taxel_u(j, cfg) - m.cu;
      const double dv = taxel_v(i, cfg) - m.cv;
      m.juu += w * du * du;
      m.juv += w * du * dv;
      m.jvv += w * dv * dv;
    }
  }
  return m;
}

namespace detail {

/// Pseudo-inverse of the symmetric 2x2 matrix [[a, b], [b, c]] applied to (x, y).
inline std::array<double, 2> pinv_apply(double a, double b, double c, double x, double y) {
  const double tr = a + c;
  const double disc = std::sqrt(std::max(0.0, 0.25 * (a - c) * (a - c) + b * b));
  const double l1 = 0.5 * tr + disc;
  const double l2 = 0.5 * tr - disc;
  std::array<double, 2> e1{}, e2{};
  if (std::abs(b) > 1e-300) {
    e1 = {l1 - c, b};
    e2 = {l2 - c, b};
  } else {
    e1 = a >= c ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
    e2 = a >= c ? std::array<double, 2>{0.0, 1.0} : std::array<double, 2>{1.0, 0.0};
  }
  const auto normalize = [](std::array<double, 2>& e) {
    const double n = std::hypot(e[0], e[1]);
    e[0] /= n;
    e[1] /= n;
  };
  normalize(e1);
  normalize(e2);
  const double cutoff = 1e-9 * std::max(std::abs(l1), 1e-300);
  std::array<double, 2> out{0.0, 0.0};
  for (const auto& [l, e] : {std::pair{l1, e1}, std::pair{l2, e2}}) {
    if (std::abs(l) <= cutoff) continue;
    const double proj = (e[0] * x + e[1] * y) / l;
    out[0] += proj * e[0];
    out[1] += proj * e[1];
  }
  return out;
}

}  // namespace detail

/// Distributes each pad contact over the pad's loaded taxels: uniform pressure plus a
/// linear gradient about the patch centroid that places the centre of pressure at the
/// contact point, shear proportional to local pressure. Values are divided by
/// `taxel_force_max` and clipped to [-1, 1].
inline std::array<std::vector<float>, 2> compute_taxel_maps(const EnvState& state, const EnvConfig& cfg) {
  std::array<std::vector<float>, 2> maps;
  for (auto& m : maps) m.assign(static_cast<std::size_t>(kTaxelSize * kTaxelSize * kChannels), 0.0f);
  for (const Contact& c : state.contacts) {
    if (c.body != ContactBody::pad_left && c.body != ContactBody::pad_right) continue;
    if (c.normal_force <= 0.0) continue;
    const bool left = c.body == ContactBody::pad_left;
    const PadGeometry g = pad_geometry(state.scene.peg, left, cfg);
    const PatchMoments m = patch_moments(g, cfg);
    if (m.weight <= 0.0) continue;
    const double qu = c.point.y - state.gripper_position.y - m.cu;
    const double qv = c.point.z - state.gripper_position.z - m.cv;
    const auto slope = detail::pinv_apply(m.juu, m.juv, m.jvv, c.normal_force * qu, c.normal_force * qv);

    std::vector<double> pressure(static_cast<std::size_t>(kTaxelSize * kTaxelSize), 0.0);
    double total = 0.0;
    for (int i = 0; i < kTaxelSize; ++i) {
      for (int j = 0; j < kTaxelSize; ++j) {
        const double w = g.row_weight[static_cast<std::size_t>(i)] * g.column_weight[static_cast<std::size_t>(j)];
        if (w <= 0.0) continue;
        const double du = taxel_u(j, cfg) - m.cu;
        const double dv = taxel_v(i, cfg) - m.cv;
        const double p = std::max(0.0, w * (c.normal_force / m.weight + du * slope[0] + dv * slope[1]));
        pressure[static_cast<std::size_t>(i * kTaxelSize + j)] = p;
        total += p;
      }
    }
    if (total <= 0.0) continue;
    // clamping negative taxels adds load; rescale so the pad still carries F
    const double rescale = c.normal_force / total;
    for (double& p : pressure) p *= rescale;
    total = c.normal_force;
    auto& map = maps[left ? 0 : 1];
    const double shear_u = c.tangential.y;
    const double shear_v = c.tangential.z;
    for (std::size_t t = 0; t < pressure.size(); ++t) {
      const double p = pressure[t];
      if (p <= 0.0) continue;
      const double share = p / total;
      map[t * kChannels + 0] += static_cast<float>(shear_u * share / cfg.taxel_force_max);
      map[t * kChannels + 1] += static_cast<float>(shear_v * share / cfg.taxel_force_max);
      map[t * kChannels + 2] += static_cast<float>(p / cfg.taxel_force_max);
    }
  }
  for (auto& m : maps) {
    for (float& v : m) v = std::clamp(v, -1.0f, 1.0f);
  }
  return maps;
}

/// Entities drawn by the renderer, back to front.
enum class Entity : std::uint8_t { background, shadow, frame, hole, peg, palm, pad };

struct RenderLayers {
  bool frame = true;
  bool peg = true;
  bool gripper = true;
  bool shadow = true;

  static RenderLayers empty() { return {false, false, false, false}; }
};

inline std::array<std::uint8_t, 3> entity_color(Entity e) {
  switch (e) {
    case Entity::background: return {204, 191, 166};
    case Entity::shadow: return {143, 134, 116};
    case Entity::frame: return {46, 92, 199};
    case Entity::hole: return {26, 26, 31};
    case Entity::peg: return {222, 48, 41};
    case Entity::palm: return {89, 89, 89};
    case Entity::pad: return {240, 200, 60};
  }
  return {0, 0, 0};
}

/// Per-pixel entity labels for a top-down pinhole camera above the table centre.
inline std::vector<Entity> render_labels(const EnvState& s, const EnvConfig& cfg, RenderLayers layers = {}) {
  std::vector<Entity> labels(static_cast<std::size_t>(kImageSize * kImageSize), Entity::background);
  const double px_per_m = 0.5 * kImageSize / cfg.view_half_extent;
  const Box2 peg_box = s.scene.has_peg ? bounds(s.scene.peg) : Box2{{0, 0}, {0, 0}};
  const double pad_lo = peg_box.lo.x - cfg.pad_thickness;
  const double pad_hi = peg_box.hi.x + cfg.pad_thickness;
  const Vec3& g = s.gripper_position;
  const double gripper_top = g.z + 0.5 * cfg.pad_height + 0.004;
  const double peg_top = g.z + cfg.peg_top_above_pad;

  const auto gripper_hit = [&](Vec2 local) -> std::optional<Entity> {
    if (local.x < pad_lo || local.x > pad_hi) return std::nullopt;
    const bool on_pad = (local.x <= peg_box.lo.x || local.x >= peg_box.hi.x) && std::abs(local.y) <= 0.5 * cfg.pad_width;
    if (on_pad) return Entity::pad;
    if (std::abs(local.y) <= 0.5 * cfg.palm_width) return Entity::palm;
    return std::nullopt;
  };

  for (int r = 0; r < kImageSize; ++r) {
    for (int c = 0; c < kImageSize; ++c) {
      const double u = (c + 0.5 - 0.5 * kImageSize) / px_per_m;
      const double v = (0.5 * kImageSize - (r + 0.5)) / px_per_m;
      const auto at_height = [&](double z) { return ((cfg.camera_height - z) / cfg.camera_height) * Vec2{u, v}; };
      Entity e = Entity::background;
      bool hit = false;
      if (layers.gripper) {
        if (auto ge = gripper_hit(at_height(gripper_top) - g.xy())) {
          e = *ge;
          hit = true;
        }
      }
      if (!hit && layers.peg && s.scene.has_peg && contains(s.scene.peg, at_height(peg_top) - g.xy())) {
        e = Entity::peg;
        hit = true;
      }
      if (!hit) {
        const Vec2 p = at_height(cfg.frame_height);
        const bool in_hole = layers.frame && inside_hole(s.scene, p);
        if (in_hole) {
          e = Entity::hole;
        } else {
          if (layers.frame) {
            const Vec2 rel = p - s.scene.target;
            const double outer = s.scene.hole_half_size + cfg.frame_border;
            const bool in_frame = s.scene.frame == FrameShape::square
                                      ? std::abs(rel.x) <= outer && std::abs(rel.y) <= outer
                                      : rel.norm() <= outer;
            if (in_frame) e = Entity::frame;
          }
          if (layers.shadow && e == Entity::background) {
            const Vec2 local = p - g.xy();
            const bool under = (layers.gripper && gripper_hit(local).has_value()) ||
                               (layers.peg && s.scene.has_peg && contains(s.scene.peg, local));
            if (under) e = Entity::shadow;
          }
        }
      }
      labels[static_cast<std::size_t>(r * kImageSize + c)] = e;
    }
  }
  return labels;
}

/// RGB image in [0, 1]; channel values are multiples of 1/255 unless image noise is on.
inline std::vector<float> render_image(const EnvState& s, const EnvConfig& cfg, RenderLayers layers = {}) {
  const auto labels = render_labels(s, cfg, layers);
  std::vector<float> image(labels.size() * kChannels);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto rgb = entity_color(labels[i]);
    for (int ch = 0; ch < kChannels; ++ch) image[i * kChannels + static_cast<std::size_t>(ch)] = static_cast<float>(rgb[static_cast<std::size_t>(ch)]) / 255.0f;
  }
  return image;
}

/// Checks TaskSpec invariants; throws std::invalid_argument naming the violation.
inline void validate_task(const TaskSpec& task, const EnvConfig& cfg) {
  validate_shape(task.peg, 0.5 * cfg.pad_width);
  const double eps = 1e-12;
  if (!std::isfinite(task.target_position.x) || !std::isfinite(task.target_position.y) ||
      std::abs(task.target_position.x) > cfg.target_range + eps ||
      std::abs(task.target_position.y) > cfg.target_range + eps) {
    throw std::invalid_argument("task: target_position outside workspace bounds");
  }
  const Vec3& g = task.init_gripper_position;
  const double bottom = g.z - cfg.peg_drop();
  if (!std::isfinite(g.x) || !std::isfinite(g.y) || !std::isfinite(g.z) ||
      std::abs(g.x) > cfg.init_xy_range + eps || std::abs(g.y) > cfg.init_xy_range + eps ||
      bottom < cfg.init_peg_bottom_min - eps || bottom > cfg.init_peg_bottom_max + eps) {
    throw std::invalid_argument("task: init_gripper_position outside randomization box");
  }
}

/// Shapes eligible for a split under the config's training-shape restriction.
inline std::vector<const PegShape*> split_shapes(const ShapeLibrary& lib, Split split, const EnvConfig& cfg) {
  auto shapes = lib.split(split);
  if (split == Split::train && !cfg.train_shapes.empty()) {
    std::vector<const PegShape*> kept;
    for (const auto& id : cfg.train_shapes) {
      const PegShape& s = lib.find(id);
      if (s.split != Split::train) throw std::invalid_argument("train_shapes: '" + id + "' is a test shape");
      kept.push_back(&s);
    }
    shapes = std::move(kept);
  }
  if (shapes.empty()) throw std::invalid_argument("split has no shapes");
  return shapes;
}

/// Draw order: peg, frame type, target x, y, gripper x, y, peg-bottom height.
inline TaskSpec sample_task(Rng& rng, Split split, const ShapeLibrary& lib, const EnvConfig& cfg) {
  const auto shapes = split_shapes(lib, split, cfg);
  TaskSpec t;
  t.peg = *shapes[rng.below(shapes.size())];
  t.target_frame = rng.below(2) == 0 ? FrameShape::square : FrameShape::circle;
  t.target_position = {rng.uniform(-cfg.target_range, cfg.target_range), rng.uniform(-cfg.target_range, cfg.target_range)};
  const double gx = rng.uniform(-cfg.init_xy_range, cfg.init_xy_range);
  const double gy = rng.uniform(-cfg.init_xy_range, cfg.init_xy_range);
  const double bottom = rng.uniform(cfg.init_peg_bottom_min, cfg.init_peg_bottom_max);
  t.init_gripper_position = {gx, gy, bottom + cfg.peg_drop()};
  return t;
}

/// Frame history for channel stacking.
class FrameStack {
 public:
  explicit FrameStack(int k = 1) : k_(k) {
    if (k < 1) throw std::invalid_argument("frame stack size must be >= 1");
  }

  void reset(const VisuoTactileObs& first) {
    frames_.assign(static_cast<std::size_t>(k_), first);
  }
  void push(const VisuoTactileObs& frame) {
    frames_.pop_front();
    frames_.push_back(frame);
  }

  int k() const { return k_; }
  const std::deque<VisuoTactileObs>& frames() const { return frames_; }

  StackedObs stacked() const {
    StackedObs s;
    s.k = k_;
    s.image_stack = interleave(&VisuoTactileObs::image, kImageSize * kImageSize);
    s.tactile_left_stack = interleave(&VisuoTactileObs::tactile_left, kTaxelSize * kTaxelSize);
    s.tactile_right_stack = interleave(&VisuoTactileObs::tactile_right, kTaxelSize * kTaxelSize);
    return s;
  }

 private:
  std::vector<float> interleave(std::vector<float> VisuoTactileObs::*field, int pixels) const {
    std::vector<float> out(static_cast<std::size_t>(pixels * kChannels * k_));
    for (int f = 0; f < k_; ++f) {
      const auto& src = frames_[static_cast<std::size_t>(f)].*field;
      for (int p = 0; p < pixels; ++p) {
        for (int ch = 0; ch < kChannels; ++ch) {
          out[static_cast<std::size_t>((p * k_ + f) * kChannels + ch)] = src[static_cast<std::size_t>(p * kChannels + ch)];
        }
      }
    }
    return out;
  }

  int k_ = 1;
  std::deque<VisuoTactileObs> frames_;
};

/// Planar peg insertion with a parallel-jaw gripper under quasi-static contact.
class InsertionEnv {
 public:
  explicit InsertionEnv(EnvConfig cfg = {}) : cfg_(std::move(cfg)), stack_(cfg_.frame_stack) {}

  const EnvConfig& config() const { return cfg_; }
  const EnvState& state() const { return state_; }
  const TaskSpec& task() const { return task_; }
  bool done() const { return state_.done_reason != DoneReason::none; }

  StackedObs reset(std::uint64_t seed, const TaskSpec& task) {
    validate_task(task, cfg_);
    task_ = task;
    rng_ = Rng(seed);
    state_ = EnvState{};
    state_.scene = make_scene(task, cfg_);
    state_.gripper_position = task.init_gripper_position;
    state_.peg_pose = {task.init_gripper_position.x, task.init_gripper_position.y, 0.0};
    resolve_pad_contacts({});
    state_.distance_to_target = distance();
    reset_ready_ = true;
    stack_.reset(observe());
    return stack_.stacked();
  }

  StepResult step(const std::array<double, 3>& action) {
    if (!reset_ready_) throw std::logic_error("env: step before reset");
    if (done()) throw std::logic_error("env: step after episode end");
    for (double a : action) {
      if (!std::isfinite(a)) throw std::invalid_argument("env: non-finite action");
    }
    const Vec3 start = state_.gripper_position;
    Vec3 cmd{start.x + cfg_.max_displacement * std::clamp(action[0], -1.0, 1.0),
             start.y + cfg_.max_displacement * std::clamp(action[1], -1.0, 1.0),
             start.z + cfg_.max_displacement * std::clamp(action[2], -1.0, 1.0)};
    cmd.x = std::clamp(cmd.x, -cfg_.workspace_half_extent, cfg_.workspace_half_extent);
    cmd.y = std::clamp(cmd.y, -cfg_.workspace_half_extent, cfg_.workspace_half_extent);
    cmd.z = std::min(cmd.z, cfg_.gripper_z_max);

    std::vector<Contact> env_contacts = resolve_motion(start, cmd);
    resolve_pad_contacts(env_contacts);
    ++state_.step_count;
    state_.distance_to_target = distance();

    StepResult out;
    out.reward = dense_reward(state_.distance_to_target);
    if (state_.distance_to_target < cfg_.success_threshold) {
      out.reward += cfg_.success_bonus;
      state_.done_reason = DoneReason::success;
    } else if (state_.step_count >= cfg_.max_steps) {
      state_.done_reason = DoneReason::timeout;
    }
    out.done = done();
    stack_.push(observe());
    out.obs = stack_.stacked();
    out.info = {state_.distance_to_target, state_.contacts, state_.done_reason};
    return out;
  }

  /// Single frame for the current state.
  VisuoTactileObs observe() {
    VisuoTactileObs o;
    o.image = render_image(state_, cfg_);
    if (cfg_.image_noise_std > 0.0) {
      for (float& v : o.image) {
        const double noisy = std::clamp(v + cfg_.image_noise_std * rng_.normal(), 0.0, 1.0);
        v = static_cast<float>(std::round(noisy * 255.0)) / 255.0f;
      }
    }
    auto maps = compute_taxel_maps(state_, cfg_);
    o.tactile_left = std::move(maps[0]);
    o.tactile_right = std::move(maps[1]);
    return o;
  }

 private:
  double distance() const {
    const Vec3& g = state_.gripper_position;
    const double dz = (g.z - cfg_.peg_drop()) - cfg_.goal_height();
    return std::sqrt((g.x - state_.scene.target.x) * (g.x - state_.scene.target.x) +
                     (g.y - state_.scene.target.y) * (g.y - state_.scene.target.y) + dz * dz);
  }

  /// Moves the gripper towards `cmd`; penetration of the plate, hole wall or table is
  /// shared between the controller spring and the contact spring.
  std::vector<Contact> resolve_motion(const Vec3& start, const Vec3& cmd) {
    const Scene& sc = state_.scene;
    const double hf = cfg_.frame_height;
    const Vec2 offset = cmd.xy() - sc.target;
    const double bottom = cmd.z - cfg_.peg_drop();
    Vec3 pen;
    std::vector<Contact> contacts;
    bool in_hole = state_.in_hole;
    if (in_hole && bottom >= hf) in_hole = false;
    if (!in_hole && bottom < hf) {
      if (footprint_fits(sc, offset)) {
        in_hole = true;
      } else {
        pen.z = hf - bottom;
        Vec2 centre;
        int outside = 0;
        for (const Vec2& v : sc.peg) {
          if (!inside_hole(sc, cmd.xy() + v)) {
            centre = centre + (cmd.xy() + v);
            ++outside;
          }
        }
        centre = (1.0 / outside) * centre;
        contacts.push_back({ContactBody::frame_top, {centre.x, centre.y, hf}, {0, 0, 1}, 0.0, {}});
      }
    }
    if (in_hole) {
      const Vec2 admissible = project_into_hole(sc, offset);
      const Vec2 push = admissible - offset;
      if (push.norm() > 1e-12) {
        pen.x = push.x;
        pen.y = push.y;
        // deepest vertex, at mid insertion depth
        Vec2 deepest = sc.peg.front();
        double worst = -1e9;
        for (const Vec2& v : sc.peg) {
          const double along = -(v.x * push.x + v.y * push.y);
          if (along > worst) {
            worst = along;
            deepest = v;
          }
        }
        const double n = push.norm();
        contacts.push_back({ContactBody::hole_wall,
                            {cmd.x + deepest.x, cmd.y + deepest.y, 0.5 * (std::max(bottom, 0.0) + hf)},
                            {push.x / n, push.y / n, 0.0},
                            0.0,
                            {}});
      }
      if (bottom < 0.0) {
        pen.z = -bottom;
        const Vec2 c = centroid(sc.peg);
        contacts.push_back({ContactBody::floor, {cmd.x + c.x, cmd.y + c.y, 0.0}, {0, 0, 1}, 0.0, {}});
      }
    }
    const double share = cfg_.contact_stiffness / (cfg_.contact_stiffness + cfg_.controller_stiffness);
    const Vec3 end = cmd + share * pen;
    const Vec3 moved = end - start;
    for (Contact& c : contacts) {
      const double depth = (1.0 - share) * (pen.x * c.normal.x + pen.y * c.normal.y + pen.z * c.normal.z);
      c.normal_force = cfg_.contact_stiffness * std::max(depth, 0.0);
      const double along = moved.x * c.normal.x + moved.y * c.normal.y + moved.z * c.normal.z;
      const Vec3 slip = moved - along * c.normal;
      const double slip_norm = slip.norm();
      if (slip_norm > 1e-9) c.tangential = (-cfg_.friction * c.normal_force / slip_norm) * slip;
    }
    state_.in_hole = in_hole;
    state_.gripper_velocity = moved;
    state_.gripper_position = end;
    state_.peg_pose = {end.x, end.y, 0.0};
    return contacts;
  }

  /// Pads balance gravity and the environment contact wrench on the peg. Normal
  /// loads add to the grip force on the pad opposing the push; tangential loads
  /// split evenly (capped by friction); moments shift each pad's centre of pressure.
  void resolve_pad_contacts(const std::vector<Contact>& env_contacts) {
    const Scene& sc = state_.scene;
    const Vec3& g = state_.gripper_position;
    const Box2 box = bounds(sc.peg);
    std::array<PadGeometry, 2> pads{pad_geometry(sc.peg, true, cfg_), pad_geometry(sc.peg, false, cfg_)};
    const PatchMoments ml = patch_moments(pads[0], cfg_);
    const PatchMoments mr = patch_moments(pads[1], cfg_);
    const Vec3 grip_centre{g.x + 0.5 * (box.lo.x + box.hi.x), g.y + 0.5 * (ml.cu + mr.cu), g.z + 0.5 * (ml.cv + mr.cv)};

    const Vec2 peg_c = centroid(sc.peg);
    Vec3 force{0.0, 0.0, -cfg_.peg_mass * 9.81};
    Vec3 torque = cross(Vec3{g.x + peg_c.x, g.y + peg_c.y, g.z + cfg_.peg_top_above_pad - 0.5 * cfg_.peg_height} - grip_centre, force);
    for (const Contact& c : env_contacts) {
      const Vec3 f = c.normal_force * c.normal + c.tangential;
      force = force + f;
      torque = torque + cross(c.point - grip_centre, f);
    }

    state_.contacts = env_contacts;
    const double n_left = cfg_.grip_force + std::max(0.0, -force.x);
    const double n_right = cfg_.grip_force + std::max(0.0, force.x);
    for (int side = 0; side < 2; ++side) {
      const bool left = side == 0;
      const PatchMoments& m = left ? ml : mr;
      if (m.weight <= 0.0) continue;
      const double n = left ? n_left : n_right;
      const double du = (left ? 1.0 : -1.0) * torque.z / (2.0 * n);
      const double dv = (left ? -1.0 : 1.0) * torque.y / (2.0 * n);
      const double u = std::clamp(m.cu + du, m.u_lo, m.u_hi);
      const double v = std::clamp(m.cv + dv, m.v_lo, m.v_hi);
      Vec3 shear{0.0, 0.5 * force.y, 0.5 * force.z};
      const double cap = cfg_.friction * n;
      if (shear.norm() > cap) shear = (cap / shear.norm()) * shear;
      const double x = g.x + (left ? box.lo.x : box.hi.x);
      state_.contacts.push_back({left ? ContactBody::pad_left : ContactBody::pad_right,
                                 {x, g.y + u, g.z + v},
                                 {left ? 1.0 : -1.0, 0.0, 0.0},
                                 n,
                                 shear});
    }
  }

  EnvConfig cfg_;
  TaskSpec task_;
  EnvState state_;
  FrameStack stack_;
  Rng rng_;
  bool reset_ready_ = false;
};

}  // namespace m3l::env
