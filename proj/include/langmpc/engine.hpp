#pragma once

// Episode scheduler: holds the plan, turns motion subtasks into MPC problems
// through the optimization designer, executes gripper actions directly and
// advances subtasks on the cost / cost-stall / timeout conditions.

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "langmpc/language.hpp"
#include "langmpc/ocp.hpp"
#include "langmpc/world.hpp"

namespace langmpc::sched {

struct GripperAction {
  int robot = 0;
  bool open = false;
  friend bool operator==(const GripperAction&, const GripperAction&) = default;
};

/// A subtask is a gripper line when any part of it is an open/close command;
/// other clauses on such a line ("Right robot: nothing") are ignored.
struct Classification {
  std::vector<GripperAction> actions;
  bool is_gripper() const { return !actions.empty(); }
};

Classification classify(std::string_view subtask, const std::vector<std::string>& robot_names);

struct TransitionConfig {
  double eps1 = 1e-3;  // cost threshold
  double eps2 = 1e-4;  // cost-change threshold
  int t_max = 200;     // steps on one subtask
  int delta_guard = 3; // cost-change test only after this many steps on the subtask
};

/// `t - t0` is the number of steps already spent on the subtask before this
/// one (0 at the first solve).
bool should_advance(double J, double J_prev, long t, long t0, const TransitionConfig& cfg);

enum class EventKind {
  PlanInstalled,
  ObjectiveDesigned,
  SolveOk,
  Infeasible,
  GripperToggled,
  SubtaskAdvanced,
  Failure,
  EpisodeDone,
};
const char* to_string(EventKind k);

enum class FailureClass { Collision, Planning, Code };
const char* to_string(FailureClass f);

struct Event {
  EventKind kind = EventKind::SolveOk;
  long step = 0;
  int cursor = 0;
  std::optional<FailureClass> failure;
  std::string message;
  nlohmann::json data = nlohmann::json::object();
};

nlohmann::json to_json(const Event& e);

/// Everything that happened during one call of Engine::step().
struct StepRecord {
  long step = 0;
  double t = 0.0;  // simulated time after the step
  int cursor = 0;  // cursor at the start of the step
  std::string subtask;
  std::string kind;  // motion | gripper | idle
  std::optional<double> J, violation;
  std::string status;
  int iterations = 0;
  int clamped = 0;
  Eigen::VectorXd x, u;  // stacked poses after the step, applied input
  std::map<std::string, world::Vec4> objects;
  std::vector<Event> events;
};

nlohmann::json to_json(const StepRecord& r);

struct EngineConfig {
  ocp::OcpConfig ocp;
  world::WorldConfig world;
  TransitionConfig transition;
  /// false strips every designer constraint (cost-only ablation).
  bool constrained = true;
};

enum class Status { Idle, Planning, Executing, Done, Failed };
const char* to_string(Status s);

class Engine {
 public:
  Engine(world::Scene scene, std::shared_ptr<lang::LanguageModule> language, EngineConfig cfg = {});

  /// Task planner round trip; installs the plan and starts execution.
  std::vector<Event> instruct(const std::string& instruction);

  /// Plan-level feedback: one planner round trip with the feedback appended,
  /// new plan installed with the cursor at 0.
  std::vector<Event> feedback_plan(const std::string& text);

  /// Subtask-level feedback: the designer is asked again for the active
  /// subtask. Throws std::logic_error when the active subtask is not a motion.
  std::vector<Event> feedback_subtask(const std::string& text);

  /// One control step (or one gripper action).
  StepRecord step();

  /// Steps until Done/Failed or `max_steps`; returns the records.
  std::vector<StepRecord> run(long max_steps);

  Status status() const { return status_; }
  const std::vector<std::string>& plan() const { return plan_; }
  int cursor() const { return cursor_; }
  long steps() const { return step_; }
  const world::World& world() const { return world_; }
  world::World& world() { return world_; }
  const EngineConfig& config() const { return cfg_; }
  const std::string& instruction() const { return instruction_; }
  const std::optional<lang::OdResponse>& active_objective() const { return active_od_; }
  const std::optional<ocp::OcpSolution>& last_solution() const { return last_solution_; }
  const std::vector<lang::OdExchange>& od_history() const { return od_history_; }
  int od_requests() const { return od_requests_; }
  lang::SceneDescription scene_description() const;

  /// True while a planner/designer call is in flight.
  bool pending_language_call() const { return pending_.load(); }

  /// Called after every successful solve with the exact problem that was solved.
  std::function<void(const ocp::OcpProblem&, const ocp::OcpSolution&)> on_solve;

 private:
  struct Activation {
    int cursor = -1;
    std::shared_ptr<expr::SymbolTable> symbols;
    ocp::OptimizationSpec spec;
    Eigen::VectorXd start;
    long t0 = 0;
    int solves = 0;
    double J_prev = 0.0;
    bool time_varying = false;  // objective references t
    std::optional<ocp::OcpSolution> warm;
  };

  Event make(EventKind k, std::string message = {}, nlohmann::json data = nlohmann::json::object()) const;
  Event fail(FailureClass f, std::string message);
  std::vector<Event> install_plan(const std::string& feedback);
  std::vector<Event> design(const std::string& feedback);
  void advance(std::vector<Event>& out);
  std::vector<double> frame(const Activation& a);  // draws observation noise
  std::shared_ptr<expr::SymbolTable> symbols_now() const;

  template <class F>
  auto language_call(F&& f);

  world::World world_;
  std::shared_ptr<lang::LanguageModule> language_;
  EngineConfig cfg_;
  std::vector<std::string> robot_names_;

  Status status_ = Status::Idle;
  std::string instruction_;
  std::vector<std::string> plan_;
  int cursor_ = 0;
  long step_ = 0;
  std::optional<Activation> act_;
  std::optional<lang::OdResponse> active_od_;
  std::optional<ocp::OcpSolution> last_solution_;
  std::vector<lang::OdExchange> od_history_;
  int od_requests_ = 0;
  std::atomic<bool> pending_{false};
};

}  // namespace langmpc::sched
