#include "langmpc/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace langmpc::bench {

using nlohmann::json;
using sched::EventKind;
using sched::FailureClass;
using sched::StepRecord;
using world::Vec3;

namespace {

std::string squash(const std::string& s) {
  std::string out;
  for (char c : s)
    if (std::isalnum(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

Vec3 pos(const world::Vec4& p) { return p.head<3>(); }

double bottom(const world::Object& o) { return o.pose.z() - o.shape.half().z(); }
double top(const world::Object& o) { return o.pose.z() + o.shape.half().z(); }

std::vector<const world::Object*> cubes_of(const world::World& w) {
  std::vector<const world::Object*> out;
  for (const auto& o : w.state().objects)
    if (o.shape.kind == world::ShapeKind::Cube) out.push_back(&o);
  return out;
}

bool any_held(const world::World& w) {
  for (const auto& r : w.state().robots)
    if (r.attached) return true;
  return false;
}

// Objects grasped at any point of the episode, from the gripper events.
std::set<std::string> grasped_objects(const std::vector<StepRecord>& trace) {
  std::set<std::string> out;
  for (const auto& r : trace)
    for (const auto& e : r.events)
      if (e.kind == EventKind::GripperToggled && !e.data.value("open", true) && e.data.contains("object") &&
          e.data["object"].is_string())
        out.insert(e.data["object"].get<std::string>());
  return out;
}

// Per step: is `id` held after the step?
std::vector<bool> held_timeline(const std::vector<StepRecord>& trace, const std::string& id) {
  std::vector<bool> out;
  bool held = false;
  for (const auto& r : trace) {
    for (const auto& e : r.events) {
      if (e.kind != EventKind::GripperToggled || !e.data.contains("object") || !e.data["object"].is_string()) continue;
      if (e.data["object"].get<std::string>() == id) held = !e.data.value("open", true);
    }
    out.push_back(held);
  }
  return out;
}

Verdict stack_ok(const world::World& w, const VerifyConfig& cfg) {
  auto cubes = cubes_of(w);
  if (cubes.size() < 2) return {false, "fewer than two cubes"};
  if (any_held(w)) return {false, "a cube is still held"};
  std::sort(cubes.begin(), cubes.end(), [](auto* a, auto* b) { return a->pose.z() < b->pose.z(); });
  const double d = w.cube_side();
  if (!near(cubes[0]->pose.z(), 0.5 * d, cfg.z_tol)) return {false, "bottom cube is not on the table"};
  for (size_t i = 1; i < cubes.size(); ++i) {
    const Eigen::Vector2d dxy = cubes[i]->pose.head<2>() - cubes[0]->pose.head<2>();
    if (dxy.norm() > 0.5 * d) return {false, cubes[i]->id + " is not above the base"};
    if (!near(cubes[i]->pose.z() - cubes[i - 1]->pose.z(), d, cfg.z_tol))
      return {false, cubes[i]->id + " is not resting on " + cubes[i - 1]->id};
  }
  return {true, {}};
}

Verdict pyramid_ok(const world::World& w, const VerifyConfig& cfg) {
  const auto cubes = cubes_of(w);
  if (any_held(w)) return {false, "a cube is still held"};
  const double d = w.cube_side();
  for (auto* t : cubes) {
    if (!near(t->pose.z(), 1.5 * d, cfg.z_tol)) continue;
    for (auto* a : cubes)
      for (auto* b : cubes) {
        if (a == t || b == t || a->id >= b->id) continue;
        if (!near(a->pose.z(), 0.5 * d, cfg.z_tol) || !near(b->pose.z(), 0.5 * d, cfg.z_tol)) continue;
        const Vec3 pa = pos(a->pose), pb = pos(b->pose);
        if (!near((pa - pb).head<2>().norm(), d, cfg.adj_tol)) continue;
        const Eigen::Vector2d mid = 0.5 * (pa + pb).head<2>();
        if ((t->pose.head<2>() - mid).norm() <= cfg.adj_tol) return {true, {}};
      }
  }
  return {false, "no two adjacent table cubes with a third centred on them"};
}

Verdict l_ok(const world::World& w, const VerifyConfig& cfg) {
  const auto cubes = cubes_of(w);
  if (cubes.size() < 4) return {false, "fewer than four cubes"};
  if (any_held(w)) return {false, "a cube is still held"};
  const double d = w.cube_side();
  for (auto* c : cubes)
    if (!near(c->pose.z(), 0.5 * d, cfg.z_tol)) return {false, c->id + " is not on the table"};
  std::vector<int> idx{0, 1, 2, 3};
  auto xy = [&](int i) -> Eigen::Vector2d { return cubes[i]->pose.head<2>(); };
  do {
    const Eigen::Vector2d ab = xy(idx[1]) - xy(idx[0]), bc = xy(idx[2]) - xy(idx[1]), ce = xy(idx[3]) - xy(idx[2]);
    if (!near(ab.norm(), d, cfg.adj_tol) || (bc - ab).norm() > cfg.adj_tol) continue;
    if (!near(ce.norm(), d, cfg.adj_tol)) continue;
    if (std::abs(ce.dot(ab.normalized())) > cfg.adj_tol) continue;
    return {true, {}};
  } while (std::next_permutation(idx.begin(), idx.end()));
  return {false, "cubes do not form a row of three with a perpendicular end cube"};
}

Verdict clean_plate_ok(const world::World& w, const std::vector<StepRecord>& trace) {
  if (w.object_index("sponge") < 0 || w.object_index("plate") < 0) return {false, "scene lacks sponge or plate"};
  const auto& plate = w.object("plate");
  const auto& sponge = w.object("sponge");
  const double radius = plate.shape.half().x();
  const auto held = held_timeline(trace, "sponge");
  double sweep = 0.0;
  std::optional<double> prev;
  for (size_t k = 0; k < trace.size(); ++k) {
    const auto it = trace[k].objects.find("sponge");
    bool contact = held[k] && it != trace[k].objects.end();
    double ang = 0.0;
    if (contact) {
      const Eigen::Vector2d rel = it->second.head<2>() - plate.pose.head<2>();
      const double sponge_bottom = it->second.z() - sponge.shape.half().z();
      contact = rel.norm() <= radius + 0.005 && rel.norm() >= 0.5 * radius && sponge_bottom <= top(plate) + 0.005;
      ang = std::atan2(rel.y(), rel.x());
    }
    if (!contact) {
      prev.reset();
      continue;
    }
    // Unsigned, so back-and-forth wiping counts as well as full circles.
    if (prev.has_value()) sweep += std::abs(std::remainder(ang - prev.value(), 2.0 * M_PI));
    prev = ang;
  }
  if (sweep < 2.0 * M_PI) {
    std::ostringstream os;
    os << "sponge swept " << std::fixed << std::setprecision(2) << sweep << " rad over the plate";
    return {false, os.str()};
  }
  return {true, {}};
}

Verdict move_wet_ok(const world::World& w, const std::vector<StepRecord>& trace, const world::Scene& initial,
                    const VerifyConfig& cfg) {
  for (const char* id : {"sponge", "sink", "container"})
    if (w.object_index(id) < 0) return {false, std::string("scene lacks ") + id};
  const auto& sponge = w.object("sponge");
  const auto& sink = w.object("sink");
  if (w.holder_of("sponge") >= 0) return {false, "sponge is still held"};
  const Eigen::Vector2d rel = sponge.pose.head<2>() - sink.pose.head<2>();
  const Vec3 h = sink.shape.half();
  if (std::abs(rel.x()) > h.x() || std::abs(rel.y()) > h.y()) return {false, "sponge is not in the sink"};

  double rest_z = sponge.pose.z();
  for (const auto& o : initial.objects)
    if (o.id == "sponge") rest_z = o.pose.z();
  const auto held = held_timeline(trace, "sponge");
  for (size_t k = 0; k < trace.size(); ++k) {
    if (!held[k]) continue;
    const auto s = trace[k].objects.find("sponge"), c = trace[k].objects.find("container");
    if (s == trace[k].objects.end() || c == trace[k].objects.end()) continue;
    if (s->second.z() <= rest_z + 0.005) continue;
    if ((s->second.head<2>() - c->second.head<2>()).norm() > cfg.under_tol || c->second.z() >= s->second.z())
      return {false, "sponge left the container at step " + std::to_string(trace[k].step)};
  }
  return {true, {}};
}

Verdict cook_steak_ok(const world::World& w) {
  for (const char* id : {"pan", "steak", "burner"})
    if (w.object_index(id) < 0) return {false, std::string("scene lacks ") + id};
  if (any_held(w)) return {false, "something is still held"};
  const auto& pan = w.object("pan");
  const auto& steak = w.object("steak");
  const auto& burner = w.object("burner");
  if ((pan.pose.head<2>() - burner.pose.head<2>()).norm() > 0.5 * burner.shape.half().x())
    return {false, "pan is not over the burner"};
  if (!near(bottom(pan), top(burner), 0.005)) return {false, "pan is not resting on the burner"};
  const Eigen::Vector2d rel = steak.pose.head<2>() - pan.pose.head<2>();
  const Vec3 h = pan.shape.half();
  if (std::abs(rel.x()) > h.x() || std::abs(rel.y()) > h.y()) return {false, "steak is not in the pan"};
  if (!near(bottom(steak), top(pan), 0.005)) return {false, "steak is not resting on the pan"};
  return {true, {}};
}

Verdict move_table_ok(const world::World& w, const std::vector<StepRecord>& trace, const world::Scene& initial,
                      const VerifyConfig& cfg) {
  if (w.object_index("table") < 0) return {false, "scene lacks a table"};
  const auto& table = w.object("table");
  world::Vec4 start = table.pose;
  for (const auto& o : initial.objects)
    if (o.id == "table") start = o.pose;
  const auto grasped = grasped_objects(trace);
  if (!grasped.count("handle_left") || !grasped.count("handle_right")) return {false, "both handles must be grasped"};
  if (w.holder_of("table") >= 0) return {false, "table is still held"};
  if (!near(bottom(table), 0.0, 0.005)) return {false, "table is not standing on the floor"};
  const Eigen::Vector2d shift = (table.pose - start).head<2>();
  if ((shift - Eigen::Vector2d(-cfg.table_shift, 0.0)).norm() > cfg.table_tol) {
    std::ostringstream os;
    os << "table moved by (" << std::fixed << std::setprecision(3) << shift.x() << ", " << shift.y() << ")";
    return {false, os.str()};
  }
  return {true, {}};
}

std::shared_ptr<const lang::PromptLibrary> prompts_for(const std::string& dir) {
  static std::mutex mu;
  static std::map<std::string, std::shared_ptr<const lang::PromptLibrary>> cache;
  std::lock_guard lock(mu);
  auto& p = cache[dir];
  if (!p) p = std::make_shared<const lang::PromptLibrary>(lang::PromptLibrary::load(dir));
  return p;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

const std::vector<TaskSpec>& registry() {
  static const std::vector<TaskSpec> tasks{
      {"Stack", "scenes/stack.json", "golden/stack.json", "cubes", "stack all cubes on top of the blue one",
       Predicate::Stack},
      {"Pyramid", "scenes/pyramid.json", "golden/pyramid.json", "cubes",
       "build a pyramid with red and blue cube at the base", Predicate::Pyramid},
      {"L", "scenes/l_shape.json", "golden/l_shape.json", "cubes", "write the letter L flat on the table",
       Predicate::LShape},
      {"CleanPlate", "scenes/clean_plate.json", "golden/clean_plate.json", "clean_plate",
       "clean the plate with the sponge", Predicate::CleanPlate},
      {"MoveWet", "scenes/move_wet.json", "golden/move_wet.json", "move_sponge",
       "move the sponge to the sink with the left robot but since it's wet make sure not to drop water using the pan",
       Predicate::MoveWet},
      {"CookSteak", "scenes/cook_steak.json", "golden/cook_steak.json", "move_sponge", "cook the steak",
       Predicate::CookSteak},
      {"MoveTable", "scenes/move_table.json", "golden/move_table.json", "move_table", "move the table 0.5m backwards",
       Predicate::MoveTable},
  };
  return tasks;
}

const TaskSpec* find_task(const std::string& name) {
  const std::string key = squash(name);
  for (const auto& t : registry()) {
    const std::string stem = std::filesystem::path(t.scene).stem().string();
    if (squash(t.name) == key || squash(stem) == key) return &t;
  }
  return nullptr;
}

Verdict check_predicate(Predicate p, const world::World& w, const std::vector<StepRecord>& trace,
                        const world::Scene& initial, const VerifyConfig& cfg) {
  switch (p) {
    case Predicate::Stack: return stack_ok(w, cfg);
    case Predicate::Pyramid: return pyramid_ok(w, cfg);
    case Predicate::LShape: return l_ok(w, cfg);
    case Predicate::CleanPlate: return clean_plate_ok(w, trace);
    case Predicate::MoveWet: return move_wet_ok(w, trace, initial, cfg);
    case Predicate::CookSteak: return cook_steak_ok(w);
    case Predicate::MoveTable: return move_table_ok(w, trace, initial, cfg);
  }
  return {false, "unknown predicate"};
}

double path_length(const Eigen::VectorXd& x_initial, const std::vector<StepRecord>& trace) {
  double total = 0.0;
  Eigen::VectorXd prev = x_initial;
  for (const auto& r : trace) {
    if (r.x.size() != prev.size()) continue;
    for (int k = 0; k + 3 < r.x.size(); k += 4) total += (r.x.segment<3>(k) - prev.segment<3>(k)).norm();
    prev = r.x;
  }
  return total;
}

EpisodeResult verify(const TaskSpec& task, const world::World& w, const std::vector<StepRecord>& trace,
                     const world::Scene& initial, sched::Status status, const VerifyConfig& cfg) {
  EpisodeResult r;
  r.task = task.name;
  r.status = sched::to_string(status);
  for (const auto& rec : trace)
    for (const auto& e : rec.events)
      if (e.kind == EventKind::Failure && e.failure) {
        if (r.failures.insert(*e.failure).second && r.reason.empty()) r.reason = e.message;
      }
  const Verdict v = check_predicate(task.predicate, w, trace, initial, cfg);
  r.predicate = v.ok;
  if (!v.ok && r.reason.empty()) r.reason = v.reason;
  const bool code = r.failures.count(FailureClass::Code) > 0;
  if (!v.ok && !code) r.failures.insert(FailureClass::Planning);
  r.success = v.ok && r.failures.empty();
  r.steps = static_cast<long>(trace.size());
  r.time_s = w.state().t;
  Eigen::VectorXd x0(4 * initial.robots.size());
  for (size_t i = 0; i < initial.robots.size(); ++i) x0.segment<4>(4 * static_cast<int>(i)) = initial.robots[i].pose;
  r.path_length = path_length(x0, trace);
  return r;
}

world::Scene episode_scene(const TaskSpec& task, std::uint64_t seed, const RunOptions& opt) {
  const std::filesystem::path scene(task.scene);
  world::Scene s = world::load_scene(scene.is_absolute() ? scene.string() : opt.asset_dir + "/" + task.scene);
  world::randomize(s, seed);
  return s;
}

Episode run_episode(const TaskSpec& task, std::uint64_t seed, const RunOptions& opt,
                    const std::function<void(sched::Engine&)>& hook) {
  const world::Scene scene = episode_scene(task, seed, opt);
  std::shared_ptr<lang::Backend> backend = opt.backend;
  if (!backend) {
    const std::string script = opt.script_override.empty() ? opt.asset_dir + "/" + task.script : opt.script_override;
    backend = std::make_shared<lang::ScriptedBackend>(lang::ScriptedBackend::load(script));
  }
  auto language =
      std::make_shared<lang::LanguageModule>(backend, prompts_for(opt.asset_dir + "/prompts"), task.family, opt.constrained);
  sched::EngineConfig cfg = opt.engine;
  cfg.constrained = opt.constrained;
  cfg.world.seed = seed;
  sched::Engine engine(scene, language, cfg);
  if (hook) hook(engine);

  Episode ep;
  const auto preamble = engine.instruct(task.instruction);
  ep.trace = engine.run(opt.max_steps);
  if (ep.trace.empty()) {
    StepRecord idle;
    idle.kind = "idle";
    idle.x = engine.world().stacked_pose();
    idle.u = Eigen::VectorXd::Zero(idle.x.size());
    for (const auto& o : engine.world().state().objects) idle.objects[o.id] = o.pose;
    ep.trace.push_back(std::move(idle));
  }
  auto& first = ep.trace.front().events;
  first.insert(first.begin(), preamble.begin(), preamble.end());

  ep.result = verify(task, engine.world(), ep.trace, scene, engine.status());
  ep.result.seed = seed;
  if (!opt.out_dir.empty()) {
    const auto dir = std::filesystem::path(opt.out_dir) / "traces";
    std::filesystem::create_directories(dir);
    const auto path = dir / (task.name + "_" + std::to_string(seed) + ".jsonl");
    std::ofstream out(path);
    out << trace_jsonl(task, seed, scene, ep.trace, ep.result);
    ep.result.trace_path = path.string();
  }
  return ep;
}

TaskSummary summarize(const std::string& task, const std::vector<EpisodeResult>& results) {
  TaskSummary s;
  s.task = task;
  std::vector<double> times, dists;
  int sr = 0, co = 0, pl = 0, cd = 0;
  for (const auto& r : results) {
    if (r.task != task) continue;
    ++s.n;
    sr += r.success;
    co += r.failures.count(FailureClass::Collision) > 0;
    pl += r.failures.count(FailureClass::Planning) > 0;
    cd += r.failures.count(FailureClass::Code) > 0;
    if (r.success) {
      times.push_back(r.time_s);
      dists.push_back(r.path_length);
    }
  }
  if (s.n == 0) return s;
  const double n = s.n;
  s.sr = 100.0 * sr / n;
  s.co = 100.0 * co / n;
  s.pl = 100.0 * pl / n;
  s.cd = 100.0 * cd / n;
  s.time_mean = mean(times);
  s.time_sd = stdev(times);
  s.dist_mean = mean(dists);
  s.dist_sd = stdev(dists);
  return s;
}

SuiteResult run_suite(const std::vector<const TaskSpec*>& tasks, int reps, std::uint64_t seed0, const RunOptions& opt) {
  struct Job {
    const TaskSpec* task;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto* t : tasks)
    for (int i = 0; i < reps; ++i) jobs.push_back({t, seed0 + static_cast<std::uint64_t>(i)});

  std::vector<EpisodeResult> results(jobs.size());
  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = run_episode(*jobs[i].task, jobs[i].seed, opt).result;
      } catch (const std::exception& e) {
        EpisodeResult r;
        r.task = jobs[i].task->name;
        r.seed = jobs[i].seed;
        r.failures.insert(FailureClass::Code);
        r.status = "Failed";
        r.reason = e.what();
        results[i] = r;
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(opt.jobs, static_cast<int>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  SuiteResult out;
  out.episodes = std::move(results);
  for (const auto* t : tasks) out.summaries.push_back(summarize(t->name, out.episodes));
  return out;
}

std::string to_csv(const std::vector<TaskSummary>& rows) {
  std::ostringstream os;
  os << "task,sr,co,pl,cd,time_mean,time_sd,dist_mean,dist_sd\n" << std::fixed;
  for (const auto& r : rows)
    os << r.task << ',' << std::setprecision(1) << r.sr << ',' << r.co << ',' << r.pl << ',' << r.cd << ','
       << std::setprecision(3) << r.time_mean << ',' << r.time_sd << ',' << r.dist_mean << ',' << r.dist_sd << '\n';
  return os.str();
}

std::string to_text(const std::vector<TaskSummary>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "task" << std::right << std::setw(6) << "n" << std::setw(8) << "SR%"
     << std::setw(8) << "CO%" << std::setw(8) << "PL%" << std::setw(8) << "CD%" << std::setw(18) << "time [s]"
     << std::setw(18) << "path [m]" << '\n'
     << std::fixed;
  for (const auto& r : rows) {
    std::ostringstream t, d;
    t << std::fixed << std::setprecision(1) << r.time_mean << " +- " << r.time_sd;
    d << std::fixed << std::setprecision(2) << r.dist_mean << " +- " << r.dist_sd;
    os << std::left << std::setw(12) << r.task << std::right << std::setw(6) << r.n << std::setprecision(1)
       << std::setw(8) << r.sr << std::setw(8) << r.co << std::setw(8) << r.pl << std::setw(8) << r.cd
       << std::setw(18) << t.str() << std::setw(18) << d.str() << '\n';
  }
  return os.str();
}

std::string trace_jsonl(const TaskSpec& task, std::uint64_t seed, const world::Scene& scene,
                        const std::vector<StepRecord>& trace, const EpisodeResult& result) {
  std::ostringstream os;
  json header{{"v", 1},        {"type", "header"}, {"task", task.name},
              {"seed", seed},  {"instruction", task.instruction}, {"scene", world::to_json(scene)}};
  os << header.dump() << '\n';
  for (const auto& r : trace) os << to_json(r).dump() << '\n';
  json failures = json::array();
  for (auto f : result.failures) failures.push_back(sched::to_string(f));
  json footer{{"v", 1},
              {"type", "result"},
              {"success", result.success},
              {"predicate", result.predicate},
              {"failures", failures},
              {"status", result.status},
              {"reason", result.reason},
              {"steps", result.steps},
              {"time", result.time_s},
              {"path_length", result.path_length}};
  os << footer.dump() << '\n';
  return os.str();
}

}  // namespace langmpc::bench
