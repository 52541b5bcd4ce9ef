#include <doctest.h>

#include <cmath>
#include <cstring>

#include "langmpc/world.hpp"

using namespace langmpc::world;
using nlohmann::json;

namespace {

json cube(const std::string& id, double x, double y, double z = 0.025) {
  return {{"id", id}, {"shape", {{"type", "cube"}, {"side", 0.05}}}, {"pose", {x, y, z, 0}}, {"graspable", true}};
}

Scene two_cubes() {
  json j = {{"name", "t"},
            {"robots", {{{"init_pose", {0.0, 0.0, 0.2, 0.0}}}}},
            {"objects", {cube("cube_1", 0.3, 0.0), cube("cube_2", 0.3, 0.2)}},
            {"params", {{"d", 0.05}, {"d_min", 0.025}}}};
  return parse_scene(j);
}

Eigen::VectorXd u4(double a, double b, double c, double d) {
  Eigen::VectorXd u(4);
  u << a, b, c, d;
  return u;
}

void teleport(World& w, const Eigen::Vector3d& target) {
  // Drive there in kinematic steps of at most 0.05 m per axis.
  for (int k = 0; k < 200; ++k) {
    const Eigen::Vector3d e = target - w.state().robots[0].pose.head<3>();
    if (e.lpNorm<Eigen::Infinity>() < 1e-12) return;
    Eigen::VectorXd u = Eigen::VectorXd::Zero(4);
    u.head<3>() = (e / 0.1).cwiseMax(-0.5).cwiseMin(0.5);
    w.apply_control(u);
  }
}

}  // namespace

TEST_CASE("kinematic step is the Euler update") {
  World w(two_cubes());
  w.apply_control(u4(0.1, 0, 0, 0));
  const Vec4 p = w.state().robots[0].pose;
  CHECK(p(0) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(p(1) == 0.0);
  CHECK(p(2) == 0.2);
  CHECK(p(3) == 0.0);
  CHECK(w.state().t == doctest::Approx(0.1));
}

TEST_CASE("inputs beyond the bounds are clamped") {
  World w(two_cubes());
  const int clamped = w.apply_control(u4(2.0, 0, -0.7, 3.0));
  CHECK(clamped == 3);
  const Vec4 p = w.state().robots[0].pose;
  CHECK(p(0) == doctest::Approx(0.05));
  CHECK(p(2) == doctest::Approx(0.15));
  CHECK(p(3) == doctest::Approx(0.1));
}

TEST_CASE("tracked mode on the reference has zero acceleration") {
  WorldConfig cfg;
  cfg.mode = Mode::Tracked;
  Scene s = two_cubes();
  s.robots[0].velocity << 0.2, -0.1, 0.0, 0.3;
  World w(s, cfg);
  const Eigen::VectorXd u = u4(0.2, -0.1, 0.0, 0.3);
  TrackingReference ref{w.stacked_pose() + 0.1 * u, u};
  w.apply_control(u, &ref);
  const auto& rb = w.state().robots[0];
  CHECK((rb.velocity - Vec4(u)).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK((rb.pose - Vec4(ref.x)).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("tracked step response matches the critically damped solution") {
  // kp = 100, kd = 20: e(t) = e0 (1 + w t) exp(-w t) with w = 10.
  WorldConfig cfg;
  cfg.mode = Mode::Tracked;
  World w(two_cubes(), cfg);
  const Vec4 start = w.state().robots[0].pose;
  Eigen::VectorXd target = start;
  target(0) += 0.1;
  TrackingReference ref{target, Eigen::VectorXd::Zero(4)};
  double prev = 0.1;
  for (int k = 1; k <= 20; ++k) {
    w.apply_control(Eigen::VectorXd::Zero(4), &ref);
    const double t = 0.1 * k;
    const double e = target(0) - w.state().robots[0].pose(0);
    const double oracle = 0.1 * (1 + 10 * t) * std::exp(-10 * t);
    CHECK(std::abs(e - oracle) < 1e-6);
    CHECK(e < prev);
    CHECK(e > 0.0);
    prev = e;
  }
}

TEST_CASE("close attaches the nearest graspable object within reach") {
  World w(two_cubes());
  teleport(w, {0.3, 0.0, 0.05});
  auto got = w.set_gripper(0, false);
  REQUIRE(got.has_value());
  CHECK(*got == "cube_1");
  CHECK(w.holder_of("cube_1") == 0);
  CHECK(w.state().robots[0].grasp_offset.isApprox(Vec4(0, 0, -0.025, 0)));

  SUBCASE("attachment stays exactly rigid") {
    for (int k = 0; k < 30; ++k) {
      w.apply_control(u4(0.13 * std::sin(k), 0.21, 0.3 * std::cos(k), 0.4));
      const Vec4 expect = w.state().robots[0].pose + w.state().robots[0].grasp_offset;
      CHECK(std::memcmp(expect.data(), w.object("cube_1").pose.data(), sizeof(double) * 4) == 0);
    }
  }
  SUBCASE("closing on a closed gripper is a no-op") { CHECK_FALSE(w.set_gripper(0, false).has_value()); }
}

TEST_CASE("close out of reach grabs nothing; open with nothing is a no-op") {
  World w(two_cubes());
  CHECK_FALSE(w.set_gripper(0, false).has_value());
  CHECK_FALSE(w.state().robots[0].attached.has_value());
  World w2(two_cubes());
  const auto before = w2.state().objects;
  CHECK_FALSE(w2.set_gripper(0, true).has_value());
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].pose == w2.state().objects[i].pose);
}

TEST_CASE("a released cube settles on the cube below it") {
  World w(two_cubes());
  teleport(w, {0.3, 0.0, 0.05});
  REQUIRE(w.set_gripper(0, false).has_value());
  teleport(w, {0.3, 0.0, 0.3});
  teleport(w, {0.31, 0.2, 0.3});
  auto released = w.set_gripper(0, true);
  REQUIRE(released.has_value());
  const auto& c1 = w.object("cube_1");
  const auto& c2 = w.object("cube_2");
  CHECK(c1.pose(2) == doctest::Approx(c2.pose(2) + 0.05).epsilon(1e-12));
  CHECK(c1.pose(0) == doctest::Approx(0.31));

  // Off the footprint it lands on the table instead.
  World w2(two_cubes());
  teleport(w2, {0.3, 0.0, 0.05});
  w2.set_gripper(0, false);
  teleport(w2, {0.3, 0.1, 0.3});
  w2.set_gripper(0, true);
  CHECK(w2.object("cube_1").pose(2) == doctest::Approx(0.025));
}

TEST_CASE("collision geometry") {
  Scene s = two_cubes();
  SUBCASE("sphere at d_min from a face is clear by 5 mm") {
    World w(s);
    w.set_gripper(0, false);  // closed, empty: full sphere
    teleport(w, {0.3 - 0.025 - 0.025, 0.0, 0.025});
    bool hit = false;
    for (const auto& c : w.collision_report())
      if (c.b == "cube_1") hit = true;
    CHECK_FALSE(hit);
    // Signed clearance is 0.005: moving 4 mm closer still does not touch.
    w.apply_control(u4(0.04, 0, 0, 0));
    for (const auto& c : w.collision_report()) CHECK(c.b != "cube_1");
    w.apply_control(u4(0.02, 0, 0, 0));
    bool touching = false;
    for (const auto& c : w.collision_report())
      if (c.b == "cube_1") touching = c.depth > 0.0 && std::abs(c.depth - 0.001) < 1e-9;
    CHECK(touching);
  }
  SUBCASE("gripper centre inside a cube penetrates") {
    World w(s);
    teleport(w, {0.3, 0.0, 0.03});
    const auto contacts = w.collision_report();
    REQUIRE(contacts.size() == 1);
    CHECK(contacts[0].a == "gripper");
    CHECK(contacts[0].b == "cube_1");
    CHECK(contacts[0].depth == doctest::Approx(0.02));
  }
  SUBCASE("open gripper only counts its centre against graspable objects") {
    World w(s);
    teleport(w, {0.3, 0.0, 0.055});  // sphere reaches 1.5 cm into the cube, centre does not
    CHECK(w.collision_report().empty());
    REQUIRE(w.set_gripper(0, false).has_value());
    CHECK(w.collision_report().empty());
  }
  SUBCASE("excluded pairs are never reported") {
    s.contact_exclusions.push_back({"gripper", "cube_1"});
    World w(s);
    teleport(w, {0.3, 0.0, 0.03});
    CHECK(w.collision_report().empty());
  }
}

TEST_CASE("pushes displace free objects and report the penetration") {
  World w(two_cubes());
  w.set_gripper(0, false);
  teleport(w, {0.3 - 0.046, 0.0, 0.025});
  CHECK(w.resolve_contacts().empty());
  w.apply_control(u4(0.1, 0, 0, 0));  // 1 cm further: 9 mm overlap with the sphere
  const auto contacts = w.resolve_contacts();
  REQUIRE(contacts.size() == 1);
  CHECK(contacts[0].depth == doctest::Approx(0.009));
  CHECK(w.object("cube_1").pose(0) == doctest::Approx(0.309));
  CHECK(w.object("cube_1").pose(2) == doctest::Approx(0.025));
  CHECK(w.collision_report().empty());
  CHECK(w.object("cube_2").pose == Vec4(0.3, 0.2, 0.025, 0));
}

TEST_CASE("free objects never move on their own") {
  World w(two_cubes());
  const auto before = w.state().objects;
  for (int k = 0; k < 50; ++k) {
    w.apply_control(u4(0.3 * std::sin(0.3 * k), 0.2, -0.1, 0.5));
    w.resolve_contacts();
  }
  for (size_t i = 0; i < before.size(); ++i) CHECK(before[i].pose == w.state().objects[i].pose);
}

TEST_CASE("groups move together and follow both holders") {
  json j = {{"robots", {{{"name", "left"}, {"init_pose", {0.4, 0.2, 0.1, 0}}}, {{"name", "right"}, {"init_pose", {0.4, -0.2, 0.1, 0}}}}},
            {"objects",
             {{{"id", "table"}, {"shape", {{"type", "box"}, {"extents", {0.2, 0.4, 0.1}}}}, {"pose", {0.4, 0, 0.05, 0}}, {"group", "t"}},
              {{"id", "handle_left"}, {"shape", {{"type", "box"}, {"extents", {0.02, 0.02, 0.02}}}}, {"pose", {0.4, 0.21, 0.11, 0}}, {"graspable", true}, {"group", "t"}},
              {{"id", "handle_right"}, {"shape", {{"type", "box"}, {"extents", {0.02, 0.02, 0.02}}}}, {"pose", {0.4, -0.21, 0.11, 0}}, {"graspable", true}, {"group", "t"}}}},
            {"contact_exclusions", json::array({json::array({"gripper_left", "t"}), json::array({"gripper_right", "t"})})}};
  World w(parse_scene(j));
  // Handles rest with the table; the group is already settled.
  CHECK(w.object("handle_left").pose(2) == doctest::Approx(0.11));
  // Grippers sit 1 cm from the handle centres.
  REQUIRE(w.set_gripper(0, false) == std::optional<std::string>("handle_left"));
  REQUIRE(w.set_gripper(1, false) == std::optional<std::string>("handle_right"));
  Eigen::VectorXd u = Eigen::VectorXd::Zero(8);
  u(2) = 0.3;
  u(6) = 0.3;
  for (int k = 0; k < 5; ++k) w.apply_control(u);
  CHECK(w.object("table").pose(2) == doctest::Approx(0.2));
  CHECK(w.object("handle_right").pose(2) == doctest::Approx(0.26));
  w.set_gripper(0, true);
  CHECK(w.object("table").pose(2) == doctest::Approx(0.2));  // still held by the right gripper
  w.set_gripper(1, true);
  CHECK(w.object("table").pose(2) == doctest::Approx(0.05));
  CHECK(w.object("handle_left").pose(2) == doctest::Approx(0.11));
}

TEST_CASE("identical seeds and commands give bit-identical trajectories") {
  auto run = [](std::uint64_t seed) {
    Scene s = two_cubes();
    s.randomize.push_back({{"cube_1", "cube_2"}, 0.2, 0.5, -0.2, 0.2, 0.12});
    randomize(s, seed);
    WorldConfig cfg;
    cfg.jitter_sigma = 0.003;
    cfg.seed = seed;
    cfg.mode = Mode::Tracked;
    World w(s, cfg);
    std::vector<double> log;
    for (int k = 0; k < 40; ++k) {
      Eigen::VectorXd u = u4(0.4 * std::cos(0.2 * k), 0.3 * std::sin(0.1 * k), -0.05, 0.2);
      TrackingReference ref{w.stacked_pose() + 0.1 * u, u};
      w.apply_control(u, &ref);
      if (k == 20) w.set_gripper(0, false);
      w.resolve_contacts();
      for (const auto& [id, p] : w.observe()) log.insert(log.end(), p.data(), p.data() + 4);
      const auto& rb = w.state().robots[0];
      log.insert(log.end(), rb.pose.data(), rb.pose.data() + 4);
    }
    return log;
  };
  const auto a = run(7), b = run(7), c = run(8);
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  CHECK(a != c);
}

TEST_CASE("randomize respects ranges and separation") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Scene s = two_cubes();
    s.randomize.push_back({{"cube_1", "cube_2"}, 0.2, 0.5, -0.2, 0.2, 0.15});
    randomize(s, seed);
    const Vec4 a = s.objects[0].pose, b = s.objects[1].pose;
    CHECK(std::hypot(a(0) - b(0), a(1) - b(1)) >= 0.15);
    for (const Vec4& p : {a, b}) {
      CHECK(p(0) >= 0.2);
      CHECK(p(0) <= 0.5);
      CHECK(std::abs(p(1)) <= 0.2);
      CHECK(p(2) == 0.025);
    }
  }
}

TEST_CASE("scene validation") {
  CHECK_THROWS_AS(parse_scene(json{{"robots", json::array()}}), SceneError);
  CHECK_THROWS_AS(load_scene("/nonexistent/scene.json"), SceneError);
  json bad = {{"robots", {{{"init_pose", {0, 0, 0.2, 0}}}}}, {"objects", {{{"id", "a"}, {"shape", "sphere"}, {"pose", {0, 0, 0}}}}}};
  CHECK_THROWS_AS(parse_scene(bad), SceneError);
  json dup = {{"robots", {{{"init_pose", {0, 0, 0.2, 0}}}}}, {"objects", {cube("a", 0, 0), cube("a", 1, 0)}}};
  CHECK_THROWS_AS(parse_scene(dup), SceneError);
  // Round trip through JSON.
  const Scene s = two_cubes();
  const Scene r = parse_scene(to_json(s));
  REQUIRE(r.objects.size() == 2);
  CHECK(r.objects[1].pose == s.objects[1].pose);
}
