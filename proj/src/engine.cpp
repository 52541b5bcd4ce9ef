#include "langmpc/engine.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>
#include <stdexcept>

#include "langmpc/autodiff.hpp"

namespace langmpc::sched {

using nlohmann::json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

int robot_by_name(const std::vector<std::string>& names, const std::string& side) {
  for (size_t i = 0; i < names.size(); ++i)
    if (lower(names[i]) == side) return static_cast<int>(i);
  return 0;
}

json vec_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

}  // namespace

Classification classify(std::string_view subtask, const std::vector<std::string>& robot_names) {
  static const std::regex prefix_re(R"((left|right)\s+robot\s*:)", std::regex::icase);
  static const std::regex grip_re(R"(\b(open|close)\s+(?:the\s+)?(?:(left|right)\s+)?grippers?\b)", std::regex::icase);

  const std::string text(subtask);
  struct Segment {
    int robot;  // -1: no prefix
    std::string body;
  };
  std::vector<Segment> segments;
  size_t pos = 0;
  int robot = -1;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), prefix_re); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    segments.push_back({robot, text.substr(pos, m.position() - pos)});
    robot = robot_by_name(robot_names, lower(m[1].str()));
    pos = m.position() + m.length();
  }
  segments.push_back({robot, text.substr(pos)});

  const int n_robots = std::max<int>(1, static_cast<int>(robot_names.size()));
  Classification c;
  auto add = [&](int r, bool open) {
    for (auto& a : c.actions)
      if (a.robot == r) {
        a.open = open;
        return;
      }
    c.actions.push_back({r, open});
  };
  for (const auto& seg : segments) {
    for (auto it = std::sregex_iterator(seg.body.begin(), seg.body.end(), grip_re); it != std::sregex_iterator(); ++it) {
      const bool open = lower((*it)[1].str()) == "open";
      if ((*it)[2].matched)
        add(robot_by_name(robot_names, lower((*it)[2].str())), open);
      else if (seg.robot >= 0)
        add(seg.robot, open);
      else
        for (int r = 0; r < n_robots; ++r) add(r, open);
    }
  }
  return c;
}

bool should_advance(double J, double J_prev, long t, long t0, const TransitionConfig& cfg) {
  if (J <= cfg.eps1) return true;
  if (t - t0 >= cfg.delta_guard && std::abs(J - J_prev) <= cfg.eps2) return true;
  return t - t0 >= cfg.t_max;
}

const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::PlanInstalled: return "PlanInstalled";
    case EventKind::ObjectiveDesigned: return "ObjectiveDesigned";
    case EventKind::SolveOk: return "SolveOk";
    case EventKind::Infeasible: return "Infeasible";
    case EventKind::GripperToggled: return "GripperToggled";
    case EventKind::SubtaskAdvanced: return "SubtaskAdvanced";
    case EventKind::Failure: return "Failure";
    case EventKind::EpisodeDone: return "EpisodeDone";
  }
  return "?";
}

const char* to_string(FailureClass f) {
  switch (f) {
    case FailureClass::Collision: return "Collision";
    case FailureClass::Planning: return "Planning";
    case FailureClass::Code: return "Code";
  }
  return "?";
}

const char* to_string(Status s) {
  switch (s) {
    case Status::Idle: return "Idle";
    case Status::Planning: return "Planning";
    case Status::Executing: return "Executing";
    case Status::Done: return "Done";
    case Status::Failed: return "Failed";
  }
  return "?";
}

json to_json(const Event& e) {
  json j{{"kind", to_string(e.kind)}, {"step", e.step}, {"cursor", e.cursor}};
  if (e.failure) j["failure"] = to_string(*e.failure);
  if (!e.message.empty()) j["message"] = e.message;
  if (!e.data.empty()) j["data"] = e.data;
  return j;
}

json to_json(const StepRecord& r) {
  json j{{"v", 1}, {"step", r.step}, {"t", r.t}, {"cursor", r.cursor}, {"subtask", r.subtask}, {"kind", r.kind}};
  j["J"] = r.J ? json(*r.J) : json(nullptr);
  j["violation"] = r.violation ? json(*r.violation) : json(nullptr);
  if (!r.status.empty()) {
    j["status"] = r.status;
    j["iterations"] = r.iterations;
  }
  j["clamped"] = r.clamped;
  j["x"] = vec_json(r.x);
  j["u"] = vec_json(r.u);
  json objs = json::object();
  for (const auto& [id, p] : r.objects) objs[id] = vec_json(p);
  j["objects"] = std::move(objs);
  j["events"] = json::array();
  for (const auto& e : r.events) j["events"].push_back(to_json(e));
  return j;
}

// ---------------------------------------------------------------------------

Engine::Engine(world::Scene scene, std::shared_ptr<lang::LanguageModule> language, EngineConfig cfg)
    : world_(std::move(scene), cfg.world), language_(std::move(language)), cfg_(std::move(cfg)) {
  for (const auto& r : world_.state().robots) robot_names_.push_back(r.name);
  cfg_.ocp.dt = cfg_.world.dt;
  cfg_.ocp.u_max_pos = cfg_.world.u_max_pos;
  cfg_.ocp.u_max_yaw = cfg_.world.u_max_yaw;
}

lang::SceneDescription Engine::scene_description() const {
  lang::SceneDescription d;
  d.robots = robot_names_;
  for (const auto& o : world_.state().objects) d.objects.push_back(o.id);
  for (const auto& [k, v] : world_.state().params) d.params.push_back(k);
  return d;
}

namespace {
struct PendingGuard {
  std::atomic<bool>& flag;
  explicit PendingGuard(std::atomic<bool>& f) : flag(f) { flag = true; }
  ~PendingGuard() { flag = false; }
};
}  // namespace

template <class F>
auto Engine::language_call(F&& f) {
  PendingGuard guard(pending_);
  return f();
}

Event Engine::make(EventKind k, std::string message, json data) const {
  Event e;
  e.kind = k;
  e.step = step_;
  e.cursor = cursor_;
  e.message = std::move(message);
  e.data = std::move(data);
  return e;
}

Event Engine::fail(FailureClass f, std::string message) {
  Event e = make(EventKind::Failure, std::move(message));
  e.failure = f;
  if (f != FailureClass::Collision) status_ = Status::Failed;
  return e;
}

std::vector<Event> Engine::instruct(const std::string& instruction) {
  if (status_ == Status::Planning || status_ == Status::Executing)
    throw std::logic_error("an instruction is already being executed");
  instruction_ = instruction;
  return install_plan("");
}

std::vector<Event> Engine::feedback_plan(const std::string& text) {
  if (instruction_.empty()) throw std::logic_error("no instruction to give feedback on");
  return install_plan(text);
}

std::vector<Event> Engine::install_plan(const std::string& feedback) {
  status_ = Status::Planning;
  std::vector<Event> out;
  lang::TpResponse tp;
  try {
    tp = language_call([&] { return language_->plan(instruction_, scene_description(), feedback); });
  } catch (const lang::SchemaError& e) {
    out.push_back(fail(FailureClass::Code, std::string("task planner: ") + e.what()));
    return out;
  } catch (const lang::BackendError& e) {
    out.push_back(fail(FailureClass::Code, std::string("task planner backend: ") + e.what()));
    return out;
  }
  plan_ = tp.tasks;
  cursor_ = 0;
  act_.reset();
  active_od_.reset();
  od_history_.clear();
  status_ = Status::Executing;
  json data{{"tasks", plan_}};
  if (!feedback.empty()) data["feedback"] = feedback;
  out.push_back(make(EventKind::PlanInstalled, {}, std::move(data)));
  return out;
}

std::vector<Event> Engine::feedback_subtask(const std::string& text) {
  if (status_ != Status::Executing || cursor_ >= static_cast<int>(plan_.size()))
    throw std::logic_error("no active subtask");
  if (classify(plan_[cursor_], robot_names_).is_gripper())
    throw std::logic_error("the active subtask is a gripper action");
  return design(text);
}

std::shared_ptr<expr::SymbolTable> Engine::symbols_now() const {
  auto table = std::make_shared<expr::SymbolTable>(robot_names_);
  for (const auto& o : world_.state().objects) table->add_object(o.id, world_.holder_of(o.id));
  for (const auto& [k, v] : world_.state().params)
    if (!table->contains(k)) table->add_param(k);
  return table;
}

std::vector<Event> Engine::design(const std::string& feedback) {
  std::vector<Event> out;
  const std::string& subtask = plan_[cursor_];
  Activation a;
  a.cursor = cursor_;
  a.symbols = symbols_now();
  a.start = world_.stacked_pose();
  a.t0 = step_;
  std::string raw;
  lang::OdResponse od;
  try {
    ++od_requests_;
    od = language_call([&] {
      return language_->design(subtask, scene_description(), plan_, od_history_, feedback, &raw);
    });
    a.spec.source_subtask = subtask;
    a.spec.objective = expr::parse(od.objective);
    expr::typecheck_scalar(*a.spec.objective, *a.symbols);
    a.time_varying = expr::references(*a.spec.objective, "t");
    if (cfg_.constrained) {
      for (const auto& s : od.equality_constraints) {
        a.spec.equalities.push_back(expr::parse(s));
        expr::typecheck_scalar(*a.spec.equalities.back(), *a.symbols);
      }
      for (const auto& s : od.inequality_constraints) {
        a.spec.inequalities.push_back(expr::parse(s));
        expr::typecheck_scalar(*a.spec.inequalities.back(), *a.symbols);
      }
    }
  } catch (const lang::BackendError& e) {
    out.push_back(fail(FailureClass::Code, std::string("optimization designer backend: ") + e.what()));
    return out;
  } catch (const lang::SchemaError& e) {
    out.push_back(fail(FailureClass::Code, std::string("optimization designer: ") + e.what()));
    return out;
  } catch (const expr::ExprError& e) {
    Event ev = fail(FailureClass::Code, e.what());
    ev.data = {{"span", {e.span().begin, e.span().end}}};
    out.push_back(std::move(ev));
    return out;
  }
  od_history_.push_back({feedback.empty() ? subtask : subtask + "\nFeedback: " + feedback, raw});
  active_od_ = od;
  act_ = std::move(a);
  json data{{"subtask", subtask},
            {"objective", od.objective},
            {"equality_constraints", od.equality_constraints},
            {"inequality_constraints", od.inequality_constraints}};
  if (!feedback.empty()) data["feedback"] = feedback;
  out.push_back(make(EventKind::ObjectiveDesigned, {}, std::move(data)));
  return out;
}

std::vector<double> Engine::frame(const Activation& a) {
  const auto& S = *a.symbols;
  ad::EvalContext ctx(S);
  const auto observed = world_.observe();
  const auto& st = world_.state();
  for (int r = 0; r < S.robot_count(); ++r) ctx.bind(S, S.start_name(r), std::span<const double>(a.start.data() + 4 * r, 4));
  for (const auto& [name, info] : S.symbols()) {
    if (info.kind == expr::SymbolKind::Object) {
      world::Vec4 v;
      if (info.robot >= 0)
        v = world_.object(name).pose - st.robots[info.robot].pose;
      else
        v = observed.at(name);
      ctx.bind(S, name, std::span<const double>(v.data(), 4));
    } else if (info.kind == expr::SymbolKind::Param) {
      ctx.bind(S, name, st.params.at(name));
    }
  }
  return ctx.frame;
}

void Engine::advance(std::vector<Event>& out) {
  out.push_back(make(EventKind::SubtaskAdvanced, {}, {{"subtask", plan_[cursor_]}}));
  ++cursor_;
  act_.reset();
  active_od_.reset();
  if (cursor_ >= static_cast<int>(plan_.size())) {
    status_ = Status::Done;
    out.push_back(make(EventKind::EpisodeDone));
  }
}

StepRecord Engine::step() {
  StepRecord rec;
  rec.step = step_;
  rec.cursor = cursor_;
  rec.kind = "idle";
  auto finish = [&] {
    rec.t = world_.state().t;
    rec.x = world_.stacked_pose();
    if (rec.u.size() == 0) rec.u = Eigen::VectorXd::Zero(rec.x.size());
    for (const auto& o : world_.state().objects) rec.objects[o.id] = o.pose;
    return rec;
  };
  if (status_ != Status::Executing) return finish();

  const std::string& subtask = plan_[cursor_];
  rec.subtask = subtask;
  const Classification cls = classify(subtask, robot_names_);

  if (cls.is_gripper()) {
    rec.kind = "gripper";
    for (const auto& a : cls.actions) {
      const auto obj = world_.set_gripper(a.robot, a.open);
      json data{{"robot", a.robot}, {"open", a.open}};
      data["object"] = obj ? json(*obj) : json(nullptr);
      rec.events.push_back(make(EventKind::GripperToggled, {}, std::move(data)));
    }
    advance(rec.events);
    ++step_;
    return finish();
  }

  rec.kind = "motion";
  if (!act_ || act_->cursor != cursor_) {
    auto ev = design("");
    rec.events.insert(rec.events.end(), ev.begin(), ev.end());
    if (status_ != Status::Executing) return finish();
  }
  Activation& a = *act_;

  ocp::OcpSolution sol;
  try {
    const ocp::OcpProblem p =
        ocp::assemble(a.spec, a.symbols, frame(a), world_.stacked_pose(), world_.state().t, cfg_.ocp);
    sol = ocp::solve(p, a.warm ? &*a.warm : nullptr);
    if (sol.status == ocp::SolveStatus::NumericFailure) {
      rec.events.push_back(fail(FailureClass::Code, "solver produced non-finite iterates"));
      ++step_;
      return finish();
    }
    if (on_solve) on_solve(p, sol);
  } catch (const expr::ExprError& e) {
    rec.events.push_back(fail(FailureClass::Code, e.what()));
    ++step_;
    return finish();
  } catch (const std::exception& e) {
    rec.events.push_back(fail(FailureClass::Code, std::string("solver: ") + e.what()));
    ++step_;
    return finish();
  }

  rec.J = sol.objective;
  rec.violation = sol.violation;
  rec.status = ocp::to_string(sol.status);
  rec.iterations = sol.iterations;
  rec.u = sol.first_input();

  world::TrackingReference ref{sol.states.col(1), sol.first_input()};
  rec.clamped = world_.apply_control(rec.u, &ref);

  json sdata{{"J", sol.objective}, {"violation", sol.violation}, {"iterations", sol.iterations}};
  if (sol.status == ocp::SolveStatus::InfeasibleRelaxed)
    rec.events.push_back(make(EventKind::Infeasible, "constraints relaxed", {{"max_slack", sol.max_slack}}));
  else
    rec.events.push_back(make(EventKind::SolveOk, {}, std::move(sdata)));

  for (const auto& c : world_.resolve_contacts()) {
    if (c.depth <= cfg_.world.collision_depth) continue;
    Event ev = fail(FailureClass::Collision, c.a + " penetrates " + c.b);
    ev.data = {{"a", c.a}, {"b", c.b}, {"depth", c.depth}};
    rec.events.push_back(std::move(ev));
  }

  // A time-varying objective never settles, so only the timeout ends it.
  bool go = should_advance(sol.objective, a.J_prev, step_, a.t0, cfg_.transition);
  if (a.time_varying) go = step_ - a.t0 >= cfg_.transition.t_max;
  a.J_prev = sol.objective;
  ++a.solves;
  last_solution_ = sol;
  a.warm = std::move(sol);
  if (go) advance(rec.events);
  ++step_;
  return finish();
}

std::vector<StepRecord> Engine::run(long max_steps) {
  std::vector<StepRecord> out;
  while (status_ == Status::Executing && static_cast<long>(out.size()) < max_steps) out.push_back(step());
  return out;
}

}  // namespace langmpc::sched
