#include <doctest.h>

#include <cmath>
#include <sstream>

#include "langmpc/bench.hpp"

using namespace langmpc;
using namespace langmpc::bench;
using nlohmann::json;

namespace {

const std::string kAssets = LANGMPC_ASSET_DIR;

world::Scene scene(const std::string& name) { return world::load_scene(kAssets + "/scenes/" + name); }

void place(world::Scene& s, const std::string& id, double x, double y, double z) {
  for (auto& o : s.objects)
    if (o.id == id) o.pose << x, y, z, 0.0;
}

Verdict check(Predicate p, const world::Scene& s, const std::vector<sched::StepRecord>& trace = {}) {
  return check_predicate(p, world::World(s), trace, s);
}

RunOptions options() {
  RunOptions opt;
  opt.asset_dir = kAssets;
  return opt;
}

}  // namespace

TEST_CASE("registry holds the seven tasks and resolves aliases") {
  CHECK(registry().size() == 7);
  for (const char* name : {"Stack", "Pyramid", "L", "CleanPlate", "MoveWet", "CookSteak", "MoveTable"}) {
    const TaskSpec* t = find_task(name);
    REQUIRE(t != nullptr);
    CHECK(t->name == name);
  }
  CHECK(find_task("stack")->name == "Stack");
  CHECK(find_task("clean_plate")->name == "CleanPlate");
  CHECK(find_task("l_shape")->name == "L");
  CHECK(find_task("move_wet")->name == "MoveWet");
  CHECK(find_task("juggle") == nullptr);
}

TEST_CASE("stack predicate on hand-built towers") {
  auto s = scene("stack.json");
  const double d = 0.05;
  place(s, "cube_2", 0.5, 0.0, 0.5 * d);
  place(s, "cube_4", 0.5, 0.0, 1.5 * d);
  place(s, "cube_3", 0.505, 0.0, 2.5 * d);
  place(s, "cube_1", 0.5, 0.004, 3.5 * d);
  CHECK(check(Predicate::Stack, s).ok);

  auto apart = s;
  place(apart, "cube_1", 0.3, -0.2, 0.5 * d);
  CHECK_FALSE(check(Predicate::Stack, apart).ok);

  auto off = s;
  place(off, "cube_1", 0.5 + 0.6 * d, 0.0, 3.5 * d);
  CHECK_FALSE(check(Predicate::Stack, off).ok);
}

TEST_CASE("pyramid predicate") {
  auto s = scene("pyramid.json");
  const double d = 0.05;
  place(s, "cube_3", 0.5, 0.0, 0.5 * d);
  place(s, "cube_4", 0.5, d, 0.5 * d);
  place(s, "cube_1", 0.5, 0.5 * d, 1.5 * d);
  place(s, "cube_2", 0.3, -0.2, 0.5 * d);
  CHECK(check(Predicate::Pyramid, s).ok);

  auto wide = s;
  place(wide, "cube_4", 0.5, 1.5 * d, 0.5 * d);
  CHECK_FALSE(check(Predicate::Pyramid, wide).ok);
}

TEST_CASE("L predicate accepts any labelling of the letter") {
  auto s = scene("l_shape.json");
  const double d = 0.05;
  place(s, "cube_4", 0.5, 0.0, 0.5 * d);
  place(s, "cube_1", 0.5 + d, 0.0, 0.5 * d);
  place(s, "cube_3", 0.5 + 2 * d, 0.0, 0.5 * d);
  place(s, "cube_2", 0.5 + 2 * d, d, 0.5 * d);
  CHECK(check(Predicate::LShape, s).ok);

  auto line = s;
  place(line, "cube_2", 0.5 + 3 * d, 0.0, 0.5 * d);
  CHECK_FALSE(check(Predicate::LShape, line).ok);

  auto lifted = s;
  place(lifted, "cube_2", 0.5 + 2 * d, 0.0, 1.5 * d);
  CHECK_FALSE(check(Predicate::LShape, lifted).ok);
}

TEST_CASE("cook steak predicate") {
  auto s = scene("cook_steak.json");
  world::World w0(s);
  const auto& burner = w0.object("burner");
  const auto& pan = w0.object("pan");
  const double burner_top = burner.pose.z() + burner.shape.half().z();
  const double pan_z = burner_top + pan.shape.half().z();
  const double dy = burner.pose.y() - pan.pose.y();
  const double dx = burner.pose.x() - pan.pose.x();
  for (auto& o : s.objects)
    if (o.group == "pan") {
      o.pose.x() += dx;
      o.pose.y() += dy;
      o.pose.z() += pan_z - pan.pose.z();
    }
  const double steak_half = world::World(s).object("steak").shape.half().z();
  place(s, "steak", burner.pose.x() + 0.01, burner.pose.y(), pan_z + pan.shape.half().z() + steak_half);
  CHECK(check(Predicate::CookSteak, s).ok);

  auto outside = s;
  place(outside, "steak", burner.pose.x() + 0.2, burner.pose.y(), pan_z + pan.shape.half().z() + steak_half);
  CHECK_FALSE(check(Predicate::CookSteak, outside).ok);
}

TEST_CASE("path length matches a hand sum") {
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(8);
  std::vector<sched::StepRecord> trace(3);
  trace[0].x = x0;
  trace[0].x.segment<3>(0) << 0.3, 0.4, 0.0;  // 0.5
  trace[1].x = trace[0].x;
  trace[1].x(3) = 1.0;                        // yaw only: 0
  trace[1].x.segment<3>(4) << 0.0, 0.0, 0.2;  // 0.2
  trace[2].x = trace[1].x;
  trace[2].x.segment<3>(0) << 0.3, 0.4, 1.2;  // 1.2
  CHECK(path_length(x0, trace) == doctest::Approx(1.9).epsilon(1e-12));
}

TEST_CASE("summary statistics use successful episodes only") {
  std::vector<EpisodeResult> rs(4);
  for (auto& r : rs) r.task = "Stack";
  rs[0].success = true, rs[0].time_s = 10, rs[0].path_length = 1.0;
  rs[1].success = true, rs[1].time_s = 14, rs[1].path_length = 2.0;
  rs[2].failures = {sched::FailureClass::Collision, sched::FailureClass::Planning};
  rs[2].time_s = 100;
  rs[3].failures = {sched::FailureClass::Code};
  const auto s = summarize("Stack", rs);
  CHECK(s.n == 4);
  CHECK(s.sr == doctest::Approx(50));
  CHECK(s.co == doctest::Approx(25));
  CHECK(s.pl == doctest::Approx(25));
  CHECK(s.cd == doctest::Approx(25));
  CHECK(s.time_mean == doctest::Approx(12));
  CHECK(s.time_sd == doctest::Approx(std::sqrt(8.0)));
  CHECK(s.dist_mean == doctest::Approx(1.5));
  CHECK(s.dist_sd == doctest::Approx(std::sqrt(0.5)));

  const std::string csv = to_csv({s});
  std::istringstream in(csv);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "task,sr,co,pl,cd,time_mean,time_sd,dist_mean,dist_sd");
  CHECK(row.rfind("Stack,50.0,25.0,25.0,25.0,12.000,", 0) == 0);
}

TEST_CASE("golden stack episode verifies and writes a parseable trace") {
  const TaskSpec& t = *find_task("Stack");
  const auto ep = run_episode(t, 3, options());
  CHECK(ep.result.success);
  CHECK(ep.result.failures.empty());
  CHECK(ep.result.time_s > 0);
  CHECK(ep.result.path_length > 0);

  const std::string text = trace_jsonl(t, 3, episode_scene(t, 3, options()), ep.trace, ep.result);
  std::istringstream in(text);
  std::string line;
  std::vector<json> lines;
  while (std::getline(in, line)) lines.push_back(json::parse(line));
  REQUIRE(lines.size() == ep.trace.size() + 2);
  CHECK(lines.front()["type"] == "header");
  CHECK(lines.front()["task"] == "Stack");
  CHECK(lines.back()["type"] == "result");
  for (const auto& l : lines) CHECK(l["v"] == 1);
}

TEST_CASE("suite output is deterministic") {
  auto opt = options();
  const std::vector<const TaskSpec*> tasks{find_task("Stack")};
  const auto a = run_suite(tasks, 2, 0, opt);
  opt.jobs = 2;
  const auto b = run_suite(tasks, 2, 0, opt);
  CHECK(to_csv(a.summaries) == to_csv(b.summaries));
  CHECK(a.summaries.at(0).sr == doctest::Approx(100));
}

TEST_CASE("different seeds give different layouts") {
  const TaskSpec& t = *find_task("Stack");
  const auto a = episode_scene(t, 1, options()), b = episode_scene(t, 2, options());
  CHECK_FALSE(a.objects[0].pose.isApprox(b.objects[0].pose));
  CHECK(episode_scene(t, 1, options()).objects[0].pose == a.objects[0].pose);
}

TEST_CASE("clean plate sweep counts wiping in both directions") {
  const auto s = scene("clean_plate.json");
  const world::World w(s);
  const auto plate = w.object("plate").pose;
  auto wipe = [&](const std::vector<double>& angles) {
    std::vector<sched::StepRecord> trace(angles.size() + 1);
    sched::Event grasp;
    grasp.kind = sched::EventKind::GripperToggled;
    grasp.data = {{"robot", ""}, {"open", false}, {"object", "sponge"}};
    trace[0].events.push_back(grasp);
    trace[0].objects["sponge"] = plate + world::Vec4(0, 0, 0.2, 0);
    for (size_t k = 0; k < angles.size(); ++k)
      trace[k + 1].objects["sponge"] =
          plate + world::Vec4(0.08 * std::cos(angles[k]), 0.08 * std::sin(angles[k]), 0.03, 0);
    return check_predicate(Predicate::CleanPlate, w, trace, s);
  };
  std::vector<double> full, half_and_back, quarter;
  for (int k = 0; k <= 64; ++k) full.push_back(2 * M_PI * k / 64 * 1.01);
  for (int k = 0; k <= 32; ++k) half_and_back.push_back(M_PI * k / 32 * 1.01);
  for (int k = 32; k >= 0; --k) half_and_back.push_back(M_PI * k / 32 * 1.01);
  for (int k = 0; k <= 16; ++k) quarter.push_back(0.5 * M_PI * k / 16);
  CHECK(wipe(full).ok);
  CHECK(wipe(half_and_back).ok);
  CHECK_FALSE(wipe(quarter).ok);
}
