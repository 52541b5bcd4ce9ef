#include "langmpc/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

namespace langmpc::world {

using nlohmann::json;

Vec3 Shape::half() const {
  switch (kind) {
    case ShapeKind::Cube:
      return Vec3::Constant(0.5 * side);
    case ShapeKind::Cylinder:
      return Vec3(radius, radius, 0.5 * height);
    case ShapeKind::Box:
      return 0.5 * extents;
  }
  return Vec3::Zero();
}

namespace {

// Contacts shallower than this are numerical touching, not overlap.
constexpr double kTouch = 1e-9;

Vec4 pose_from(const json& j) {
  if (!j.is_array() || (j.size() != 3 && j.size() != 4)) throw SceneError("pose must be a 3- or 4-element array");
  Vec4 p = Vec4::Zero();
  for (size_t i = 0; i < j.size(); ++i) p(static_cast<int>(i)) = j[i].get<double>();
  return p;
}

Vec3 vec3_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw SceneError("expected a 3-element array");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

json to_array(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Shape shape_from(const json& j, double default_side) {
  Shape s;
  std::string type;
  if (j.is_string()) {
    type = j.get<std::string>();
  } else if (j.is_object()) {
    type = j.value("type", "");
  } else {
    throw SceneError("object shape must be a string or an object");
  }
  if (type == "cube") {
    s.kind = ShapeKind::Cube;
    s.side = j.is_object() ? j.value("side", default_side) : default_side;
  } else if (type == "cylinder") {
    s.kind = ShapeKind::Cylinder;
    if (!j.is_object() || !j.contains("radius") || !j.contains("height"))
      throw SceneError("cylinder needs radius and height");
    s.radius = j["radius"].get<double>();
    s.height = j["height"].get<double>();
  } else if (type == "box") {
    s.kind = ShapeKind::Box;
    if (!j.is_object() || !j.contains("extents")) throw SceneError("box needs extents");
    s.extents = vec3_from(j["extents"]);
  } else {
    throw SceneError("unknown shape type '" + type + "'");
  }
  const Vec3 h = s.half();
  if (!(h.minCoeff() > 0.0)) throw SceneError("shape dimensions must be positive");
  return s;
}

json shape_json(const Shape& s) {
  switch (s.kind) {
    case ShapeKind::Cube:
      return {{"type", "cube"}, {"side", s.side}};
    case ShapeKind::Cylinder:
      return {{"type", "cylinder"}, {"radius", s.radius}, {"height", s.height}};
    case ShapeKind::Box:
      return {{"type", "box"}, {"extents", to_array(s.extents)}};
  }
  return {};
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double normal(std::mt19937_64& rng) {
  // Box-Muller; avoids the implementation-defined std::normal_distribution.
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct Box {
  Vec3 c, h;
};

Box box_of(const Object& o) { return {o.pose.head<3>(), o.shape.half()}; }

// Penetration of a sphere into a box; `n` points from the box towards the
// sphere centre.
double sphere_box(const Vec3& p, double r, const Box& b, Vec3& n) {
  const Vec3 q = p - b.c;
  const Vec3 cl = q.cwiseMax(-b.h).cwiseMin(b.h);
  const Vec3 diff = q - cl;
  const double dist = diff.norm();
  if (dist > 0.0) {
    n = diff / dist;
    return r - dist;
  }
  int axis = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    const double gap = b.h(i) - std::abs(q(i));
    if (gap < best) {
      best = gap;
      axis = i;
    }
  }
  n = Vec3::Zero();
  n(axis) = q(axis) >= 0.0 ? 1.0 : -1.0;
  return r + best;
}

// Overlap depth of two boxes (smallest axis overlap, <= 0 when apart).
// `push` receives the smallest horizontal displacement that separates b from a.
double box_box(const Box& a, const Box& b, Vec3& push) {
  Vec3 overlap;
  for (int i = 0; i < 3; ++i) overlap(i) = a.h(i) + b.h(i) - std::abs(a.c(i) - b.c(i));
  push = Vec3::Zero();
  const int ax = overlap(0) <= overlap(1) ? 0 : 1;
  push(ax) = (b.c(ax) >= a.c(ax) ? 1.0 : -1.0) * overlap(ax);
  return overlap.minCoeff();
}

bool footprints_overlap(const Box& a, const Box& b) {
  constexpr double eps = 1e-9;
  return std::abs(a.c.x() - b.c.x()) < a.h.x() + b.h.x() - eps && std::abs(a.c.y() - b.c.y()) < a.h.y() + b.h.y() - eps;
}

}  // namespace

Scene parse_scene(const json& j) {
  Scene s;
  try {
    s.name = j.value("name", "");
    if (j.contains("params"))
      for (auto& [k, v] : j["params"].items()) s.params[k] = v.get<double>();
    const double d = s.params.count("d") ? s.params["d"] : 0.05;
    if (!j.contains("robots") || !j["robots"].is_array() || j["robots"].empty())
      throw SceneError("scene needs at least one robot");
    for (const auto& r : j["robots"]) {
      Robot rb;
      rb.name = r.value("name", "");
      if (r.contains("base")) rb.base = vec3_from(r["base"]);
      if (!r.contains("init_pose")) throw SceneError("robot needs init_pose");
      rb.pose = pose_from(r["init_pose"]);
      s.robots.push_back(rb);
    }
    std::set<std::string> names;
    for (const auto& r : s.robots)
      if (!names.insert(r.name).second) throw SceneError("duplicate robot name '" + r.name + "'");
    if (s.robots.size() > 1)
      for (const auto& r : s.robots)
        if (r.name.empty()) throw SceneError("multi-robot scenes need robot names");
    std::set<std::string> ids;
    for (const auto& o : j.value("objects", json::array())) {
      Object ob;
      ob.id = o.at("id").get<std::string>();
      if (!ids.insert(ob.id).second) throw SceneError("duplicate object id '" + ob.id + "'");
      ob.shape = shape_from(o.at("shape"), d);
      ob.pose = pose_from(o.at("pose"));
      ob.graspable = o.value("graspable", false);
      ob.group = o.value("group", "");
      ob.color = o.value("color", "");
      s.objects.push_back(ob);
    }
    for (const auto& e : j.value("contact_exclusions", json::array())) {
      if (!e.is_array() || e.size() != 2) throw SceneError("contact exclusion must be a pair");
      s.contact_exclusions.emplace_back(e[0].get<std::string>(), e[1].get<std::string>());
    }
    for (const auto& r : j.value("randomize", json::array())) {
      RandomizeRule rule;
      rule.ids = r.at("ids").get<std::vector<std::string>>();
      const auto x = r.at("x").get<std::vector<double>>();
      const auto y = r.at("y").get<std::vector<double>>();
      if (x.size() != 2 || y.size() != 2 || x[0] > x[1] || y[0] > y[1]) throw SceneError("bad randomize range");
      rule.x_lo = x[0];
      rule.x_hi = x[1];
      rule.y_lo = y[0];
      rule.y_hi = y[1];
      rule.min_separation = r.value("min_separation", 0.0);
      s.randomize.push_back(rule);
    }
  } catch (const json::exception& e) {
    throw SceneError(std::string("scene: ") + e.what());
  }
  return s;
}

Scene load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SceneError("cannot open scene file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw SceneError("scene '" + path + "': " + e.what());
  }
  return parse_scene(j);
}

json to_json(const Scene& s) {
  json j;
  j["name"] = s.name;
  j["robots"] = json::array();
  for (const auto& r : s.robots)
    j["robots"].push_back({{"name", r.name}, {"base", to_array(r.base)}, {"init_pose", to_array(r.pose)}});
  j["objects"] = json::array();
  for (const auto& o : s.objects) {
    json jo = {{"id", o.id}, {"shape", shape_json(o.shape)}, {"pose", to_array(o.pose)}, {"graspable", o.graspable}};
    if (!o.group.empty()) jo["group"] = o.group;
    if (!o.color.empty()) jo["color"] = o.color;
    j["objects"].push_back(jo);
  }
  j["params"] = s.params;
  j["contact_exclusions"] = json::array();
  for (const auto& [a, b] : s.contact_exclusions) j["contact_exclusions"].push_back({a, b});
  return j;
}

void randomize(Scene& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::pair<double, double>> placed;
  std::vector<double> placed_sep;
  for (const auto& rule : s.randomize) {
    for (const auto& id : rule.ids) {
      std::vector<Object*> members;
      for (auto& o : s.objects)
        if (o.id == id || o.group == id) members.push_back(&o);
      if (members.empty()) throw SceneError("randomize: unknown object or group '" + id + "'");
      bool ok = false;
      double x = 0, y = 0;
      for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
        x = rule.x_lo + (rule.x_hi - rule.x_lo) * uniform01(rng);
        y = rule.y_lo + (rule.y_hi - rule.y_lo) * uniform01(rng);
        ok = true;
        for (size_t k = 0; k < placed.size() && ok; ++k) {
          const double sep = std::max(rule.min_separation, placed_sep[k]);
          ok = std::hypot(x - placed[k].first, y - placed[k].second) >= sep;
        }
      }
      if (!ok) throw SceneError("randomize: cannot satisfy separation for '" + id + "'");
      const double dx = x - members.front()->pose.x(), dy = y - members.front()->pose.y();
      for (Object* o : members) {
        o->pose.x() += dx;
        o->pose.y() += dy;
      }
      placed.emplace_back(x, y);
      placed_sep.push_back(rule.min_separation);
    }
  }
}

World::World(Scene scene, WorldConfig cfg) : scene_(std::move(scene)), cfg_(cfg), rng_(cfg.seed) {
  state_.robots = scene_.robots;
  state_.objects = scene_.objects;
  state_.params = scene_.params;
  for (int i = 0; i < static_cast<int>(state_.objects.size()); ++i) object_index_[state_.objects[i].id] = i;
  settle_all();
}

int World::robot_index(const std::string& name) const {
  for (int i = 0; i < robot_count(); ++i)
    if (state_.robots[i].name == name) return i;
  return -1;
}

int World::object_index(const std::string& id) const {
  auto it = object_index_.find(id);
  return it == object_index_.end() ? -1 : it->second;
}

Eigen::VectorXd World::stacked_pose() const {
  Eigen::VectorXd x(4 * robot_count());
  for (int r = 0; r < robot_count(); ++r) x.segment<4>(4 * r) = state_.robots[r].pose;
  return x;
}

double World::cube_side() const {
  auto it = state_.params.find("d");
  return it == state_.params.end() ? 0.05 : it->second;
}

std::vector<int> World::group_members(int i) const {
  const auto& g = state_.objects[i].group;
  if (g.empty()) return {i};
  std::vector<int> out;
  for (int k = 0; k < static_cast<int>(state_.objects.size()); ++k)
    if (state_.objects[k].group == g) out.push_back(k);
  return out;
}

int World::holder_of(const std::string& id) const {
  const int i = object_index(id);
  if (i < 0) return -1;
  const auto members = group_members(i);
  for (int r = 0; r < robot_count(); ++r) {
    const auto& a = state_.robots[r].attached;
    if (!a) continue;
    const int ai = object_index(*a);
    if (std::find(members.begin(), members.end(), ai) != members.end()) return r;
  }
  return -1;
}

bool World::excluded(const std::string& a, const std::string& b) const {
  auto names = [&](const std::string& id) {
    std::vector<std::string> n{id};
    const int i = object_index(id);
    if (i >= 0 && !state_.objects[i].group.empty()) n.push_back(state_.objects[i].group);
    return n;
  };
  const auto na = names(a), nb = names(b);
  for (const auto& [x, y] : scene_.contact_exclusions)
    for (const auto& p : na)
      for (const auto& q : nb)
        if ((x == p && y == q) || (x == q && y == p)) return true;
  return false;
}

void World::move_group(int i, const Vec3& delta) {
  for (int k : group_members(i)) state_.objects[k].pose.head<3>() += delta;
}

double World::support_height(int i) const {
  const auto members = group_members(i);
  const Box bi = box_of(state_.objects[i]);
  const double bottom = bi.c.z() - bi.h.z();
  double support = 0.0;
  for (int k = 0; k < static_cast<int>(state_.objects.size()); ++k) {
    if (std::find(members.begin(), members.end(), k) != members.end()) continue;
    if (holder_of(state_.objects[k].id) >= 0) continue;
    const Box bk = box_of(state_.objects[k]);
    const double top = bk.c.z() + bk.h.z();
    if (top <= bottom + 1e-6 && footprints_overlap(bi, bk)) support = std::max(support, top);
  }
  return support;
}

void World::settle_group(int i) {
  if (holder_of(state_.objects[i].id) >= 0) return;
  double drop = std::numeric_limits<double>::infinity();
  for (int k : group_members(i)) {
    const Box b = box_of(state_.objects[k]);
    drop = std::min(drop, b.c.z() - b.h.z() - support_height(k));
  }
  if (drop > 0.0 && std::isfinite(drop)) move_group(i, Vec3(0, 0, -drop));
}

void World::settle_all() {
  // Lowest first so that stacks come down in order.
  std::vector<int> order(state_.objects.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const Box ba = box_of(state_.objects[a]), bb = box_of(state_.objects[b]);
    return ba.c.z() - ba.h.z() < bb.c.z() - bb.h.z();
  });
  for (int i : order) settle_group(i);
}

void World::carry() {
  // A held member sits at holder pose + grasp offset. A group grasped by two
  // grippers follows the mean of their displacements.
  std::map<std::string, std::vector<std::pair<int, Vec4>>> groups;
  for (const auto& rb : state_.robots) {
    if (!rb.attached) continue;
    const int ai = object_index(*rb.attached);
    const auto& g = state_.objects[ai].group;
    groups[g.empty() ? "#" + *rb.attached : g].emplace_back(ai, rb.pose + rb.grasp_offset);
  }
  for (const auto& [key, grasps] : groups) {
    Vec4 delta = Vec4::Zero();
    for (const auto& [ai, target] : grasps) delta += target - state_.objects[ai].pose;
    delta /= static_cast<double>(grasps.size());
    for (int k : group_members(grasps.front().first)) state_.objects[k].pose += delta;
    if (grasps.size() == 1) state_.objects[grasps.front().first].pose = grasps.front().second;
  }
}

int World::apply_control(const Eigen::VectorXd& u_in, const TrackingReference* ref) {
  const int R = robot_count();
  if (u_in.size() != 4 * R) throw std::invalid_argument("apply_control: input has wrong size");
  Eigen::VectorXd u = u_in;
  int clamped = 0;
  for (int i = 0; i < u.size(); ++i) {
    const double lim = (i % 4 == 3) ? cfg_.u_max_yaw : cfg_.u_max_pos;
    if (!std::isfinite(u(i))) throw std::invalid_argument("apply_control: non-finite input");
    if (std::abs(u(i)) > lim) {
      u(i) = std::clamp(u(i), -lim, lim);
      ++clamped;
    }
  }
  const double dt = cfg_.dt;
  if (cfg_.mode == Mode::Kinematic) {
    for (int r = 0; r < R; ++r) state_.robots[r].pose += dt * u.segment<4>(4 * r);
  } else {
    // x*(tau) runs along the planned first stage: x* = x_ref - (dt - tau) u*.
    Eigen::VectorXd xr = stacked_pose() + dt * u;
    if (ref && ref->x.size() == 4 * R) xr = ref->x;
    const double h = dt / cfg_.inner_steps;
    for (int r = 0; r < R; ++r) {
      Vec4 p = state_.robots[r].pose, v = state_.robots[r].velocity;
      const Vec4 us = u.segment<4>(4 * r);
      const Vec4 xe = xr.segment<4>(4 * r);
      auto acc = [&](double tau, const Vec4& pp, const Vec4& vv) -> Vec4 {
        const Vec4 xs = xe - (dt - tau) * us;
        return cfg_.kp * (xs - pp) + cfg_.kd * (us - vv);
      };
      double tau = 0.0;
      for (int s = 0; s < cfg_.inner_steps; ++s) {
        const Vec4 k1p = v, k1v = acc(tau, p, v);
        const Vec4 k2p = v + 0.5 * h * k1v, k2v = acc(tau + 0.5 * h, p + 0.5 * h * k1p, v + 0.5 * h * k1v);
        const Vec4 k3p = v + 0.5 * h * k2v, k3v = acc(tau + 0.5 * h, p + 0.5 * h * k2p, v + 0.5 * h * k2v);
        const Vec4 k4p = v + h * k3v, k4v = acc(tau + h, p + h * k3p, v + h * k3v);
        p += h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p);
        v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v);
        tau += h;
      }
      state_.robots[r].pose = p;
      state_.robots[r].velocity = v;
    }
  }
  carry();
  state_.t += dt;
  return clamped;
}

std::optional<std::string> World::set_gripper(int robot, bool open) {
  auto& rb = state_.robots.at(robot);
  if (open) {
    rb.gripper_open = true;
    if (!rb.attached) return std::nullopt;
    const std::string id = *rb.attached;
    rb.attached.reset();
    rb.grasp_offset.setZero();
    settle_group(object_index(id));
    return id;
  }
  if (!rb.gripper_open) return std::nullopt;
  rb.gripper_open = false;
  const double radius = 0.5 * cube_side() + cfg_.grasp_margin;
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(state_.objects.size()); ++i) {
    const auto& o = state_.objects[i];
    if (!o.graspable) continue;
    const double dist = (o.pose.head<3>() - rb.pose.head<3>()).norm();
    if (dist <= radius && dist < best_d) {
      best_d = dist;
      best = i;
    }
  }
  if (best < 0) return std::nullopt;
  rb.attached = state_.objects[best].id;
  rb.grasp_offset = state_.objects[best].pose - rb.pose;
  return rb.attached;
}

std::vector<Contact> World::collision_report() const {
  std::vector<Contact> out;
  const int R = robot_count();
  const int M = static_cast<int>(state_.objects.size());
  std::vector<int> holder(M, -1);
  for (int i = 0; i < M; ++i) holder[i] = holder_of(state_.objects[i].id);
  for (int r = 0; r < R; ++r) {
    const auto& rb = state_.robots[r];
    const std::string body = rb.body_id();
    const Vec3 p = rb.pose.head<3>();
    for (int i = 0; i < M; ++i) {
      const auto& o = state_.objects[i];
      if (holder[i] == r || excluded(body, o.id)) continue;
      // An open gripper straddles graspable objects; only its centre counts.
      const double radius = (rb.gripper_open && o.graspable) ? 0.0 : cfg_.gripper_radius;
      Vec3 n;
      const double depth = sphere_box(p, radius, box_of(o), n);
      if (depth > kTouch) out.push_back({body, o.id, depth});
    }
    for (int q = r + 1; q < R; ++q) {
      const auto& other = state_.robots[q];
      if (excluded(body, other.body_id())) continue;
      const double depth = 2 * cfg_.gripper_radius - (other.pose.head<3>() - p).norm();
      if (depth > kTouch) out.push_back({body, other.body_id(), depth});
    }
  }
  for (int i = 0; i < M; ++i) {
    if (holder[i] < 0) continue;
    const auto members = group_members(i);
    for (int k = 0; k < M; ++k) {
      if (std::find(members.begin(), members.end(), k) != members.end()) continue;
      if (holder[k] >= 0 && k < i) continue;  // held vs held reported once
      if (excluded(state_.objects[i].id, state_.objects[k].id)) continue;
      Vec3 push;
      const double depth = box_box(box_of(state_.objects[i]), box_of(state_.objects[k]), push);
      if (depth > kTouch) out.push_back({state_.objects[i].id, state_.objects[k].id, depth});
    }
  }
  return out;
}

std::vector<Contact> World::resolve_contacts() {
  const auto contacts = collision_report();
  bool moved = false;
  for (const auto& c : contacts) {
    if (c.depth <= cfg_.collision_depth) continue;
    const int target = object_index(c.b);
    if (target < 0 || holder_of(c.b) >= 0) continue;
    Vec3 push = Vec3::Zero();
    const int a_obj = object_index(c.a);
    if (a_obj >= 0) {
      box_box(box_of(state_.objects[a_obj]), box_of(state_.objects[target]), push);
    } else {
      const int r = robot_index(c.a == "gripper" ? "" : c.a.substr(8));
      if (r < 0) continue;
      const auto& rb = state_.robots[r];
      const double radius = (rb.gripper_open && state_.objects[target].graspable) ? 0.0 : cfg_.gripper_radius;
      Vec3 n;
      const double depth = sphere_box(rb.pose.head<3>(), radius, box_of(state_.objects[target]), n);
      Eigen::Vector2d nh(n.x(), n.y());
      if (nh.norm() < 1e-12 || depth <= 0.0) continue;  // pressed from straight above: nowhere to go
      nh.normalize();
      push = Vec3(-nh.x(), -nh.y(), 0.0) * depth;
    }
    move_group(target, push);
    moved = true;
  }
  if (moved) settle_all();
  return contacts;
}

std::map<std::string, Vec4> World::observe() {
  std::map<std::string, Vec4> out;
  for (const auto& o : state_.objects) {
    Vec4 p = o.pose;
    if (cfg_.jitter_sigma > 0.0 && holder_of(o.id) < 0)
      for (int i = 0; i < 3; ++i) p(i) += cfg_.jitter_sigma * normal(rng_);
    out[o.id] = p;
  }
  return out;
}

}  // namespace langmpc::world
