#pragma once

// Quasi-static tabletop world: point-mass grippers, rigid objects that can be
// grasped in groups, drop-to-support on release and push-out on penetration.

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace langmpc::world {

using Vec4 = Eigen::Matrix<double, 4, 1>;
using Vec3 = Eigen::Vector3d;

class SceneError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { Cube, Cylinder, Box };

struct Shape {
  ShapeKind kind = ShapeKind::Cube;
  double side = 0.05;      // cube
  double radius = 0.0;     // cylinder
  double height = 0.0;     // cylinder
  Vec3 extents = Vec3::Zero();  // box, full lengths

  /// Axis-aligned half extents (cylinders use their bounding box).
  Vec3 half() const;
};

struct Object {
  std::string id;
  Shape shape;
  Vec4 pose = Vec4::Zero();
  bool graspable = false;
  std::string group;  // objects sharing a group move as one rigid body
  std::string color;
};

struct Robot {
  std::string name;  // empty for single-arm scenes
  Vec3 base = Vec3::Zero();
  Vec4 pose = Vec4::Zero();
  Vec4 velocity = Vec4::Zero();  // tracked mode only
  bool gripper_open = true;
  std::optional<std::string> attached;  // object id that was grasped
  Vec4 grasp_offset = Vec4::Zero();     // attached pose - gripper pose at grasp

  /// Identifier used in collision pairs and contact exclusions.
  std::string body_id() const { return name.empty() ? "gripper" : "gripper_" + name; }
};

struct RandomizeRule {
  std::vector<std::string> ids;  // object ids or group names
  double x_lo = 0, x_hi = 0, y_lo = 0, y_hi = 0;
  double min_separation = 0.0;
};

struct Scene {
  std::string name;
  std::vector<Robot> robots;
  std::vector<Object> objects;
  std::map<std::string, double> params;
  std::vector<std::pair<std::string, std::string>> contact_exclusions;
  std::vector<RandomizeRule> randomize;
};

Scene parse_scene(const nlohmann::json& j);
Scene load_scene(const std::string& path);
nlohmann::json to_json(const Scene& s);

/// Moves the randomized objects of `s` to uniformly drawn table positions,
/// rejecting draws that violate the rules' pairwise separation. Deterministic
/// in `seed`.
void randomize(Scene& s, std::uint64_t seed);

enum class Mode { Kinematic, Tracked };

struct WorldConfig {
  double dt = 0.1;
  Mode mode = Mode::Kinematic;
  double gripper_radius = 0.02;
  /// Close attaches the nearest graspable object whose centre is within
  /// 0.5 * d + grasp_margin of the gripper.
  double grasp_margin = 0.01;
  double collision_depth = 1e-3;
  double u_max_pos = 0.5;
  double u_max_yaw = 1.0;
  double kp = 100.0;
  double kd = 20.0;
  int inner_steps = 10;
  double jitter_sigma = 0.0;  // std-dev of observed object positions (m)
  std::uint64_t seed = 0;
};

struct WorldState {
  std::vector<Robot> robots;
  std::vector<Object> objects;
  std::map<std::string, double> params;
  double t = 0.0;
};

struct Contact {
  std::string a, b;
  double depth = 0.0;
};

/// Reference for tracked mode: planned next state and first input.
struct TrackingReference {
  Eigen::VectorXd x, u;
};

class World {
 public:
  World(Scene scene, WorldConfig cfg = {});

  const WorldState& state() const { return state_; }
  const WorldConfig& config() const { return cfg_; }
  const Scene& scene() const { return scene_; }

  int robot_count() const { return static_cast<int>(state_.robots.size()); }
  int robot_index(const std::string& name) const;
  int object_index(const std::string& id) const;
  const Object& object(const std::string& id) const { return state_.objects.at(object_index(id)); }

  /// Stacked gripper poses [x_robot0, x_robot1, ...].
  Eigen::VectorXd stacked_pose() const;

  /// Cube side `d` (scene parameter, default 0.05).
  double cube_side() const;

  /// One control period. `u` is stacked like stacked_pose(); components beyond
  /// the input bounds are clamped and counted in the return value. Tracked mode
  /// needs `ref`; without one the reference is the current pose at rest.
  int apply_control(const Eigen::VectorXd& u, const TrackingReference* ref = nullptr);

  /// Returns the id of the newly attached object (close) or released object
  /// (open), if any.
  std::optional<std::string> set_gripper(int robot, bool open);

  /// Penetrations between moving bodies (grippers, held objects) and
  /// everything else; read-only.
  std::vector<Contact> collision_report() const;

  /// collision_report() followed by pushing free objects out of the moving
  /// bodies and re-settling them. Returns the contacts found before pushing.
  std::vector<Contact> resolve_contacts();

  /// Object poses as the perception layer reports them (jittered when
  /// jitter_sigma > 0).
  std::map<std::string, Vec4> observe();

  /// Robot currently holding the group of `id`, or -1.
  int holder_of(const std::string& id) const;

  bool excluded(const std::string& a, const std::string& b) const;

  /// Height of the highest support below `objects[i]` (table is z = 0).
  double support_height(int i) const;

 private:
  std::vector<int> group_members(int i) const;
  void move_group(int i, const Vec3& delta);
  void settle_group(int i);
  void settle_all();
  void carry();

  Scene scene_;
  WorldConfig cfg_;
  WorldState state_;
  std::map<std::string, int> object_index_;
  std::mt19937_64 rng_;
};

}  // namespace langmpc::world
