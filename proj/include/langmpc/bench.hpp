#pragma once

// Benchmark harness: task registry, success predicates, failure accounting,
// efficiency metrics and trace/summary writers.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "langmpc/engine.hpp"

namespace langmpc::bench {

enum class Predicate { Stack, Pyramid, LShape, CleanPlate, MoveWet, CookSteak, MoveTable };

struct TaskSpec {
  std::string name;         // Stack, Pyramid, L, CleanPlate, MoveWet, CookSteak, MoveTable
  std::string scene;        // relative to the asset dir
  std::string script;       // golden script, relative to the asset dir
  std::string family;       // prompt family
  std::string instruction;
  Predicate predicate;
};

const std::vector<TaskSpec>& registry();

/// Accepts the registry name or a lower/snake-case alias ("stack", "clean_plate", "l_shape").
const TaskSpec* find_task(const std::string& name);

struct VerifyConfig {
  double d = 0.05;         // cube side
  double z_tol = 0.01;     // stacking height tolerance
  double adj_tol = 0.0125; // d/4: pyramid and L placement tolerance
  double under_tol = 0.05; // Move Wet: container under sponge
  double table_shift = 0.5;
  double table_tol = 0.05;
};

struct Verdict {
  bool ok = false;
  std::string reason;
};

/// Pure function of the final world and the step trace.
Verdict check_predicate(Predicate p, const world::World& final_world, const std::vector<sched::StepRecord>& trace,
                        const world::Scene& initial, const VerifyConfig& cfg = {});

struct EpisodeResult {
  std::string task;
  std::uint64_t seed = 0;
  bool success = false;
  bool predicate = false;
  std::set<sched::FailureClass> failures;
  long steps = 0;
  double time_s = 0.0;       // simulated execution time
  double path_length = 0.0;  // summed over robots
  std::string status;
  std::string reason;
  std::string trace_path;
};

/// Sum over steps and robots of the gripper displacement (positions only).
double path_length(const Eigen::VectorXd& x_initial, const std::vector<sched::StepRecord>& trace);

EpisodeResult verify(const TaskSpec& task, const world::World& final_world, const std::vector<sched::StepRecord>& trace,
                     const world::Scene& initial, sched::Status status, const VerifyConfig& cfg = {});

struct RunOptions {
  std::string asset_dir;
  std::string out_dir;  // empty: no files
  sched::EngineConfig engine;
  bool constrained = true;
  long max_steps = 20000;
  int jobs = 1;
  std::string script_override;  // replaces the task's golden script
  std::shared_ptr<lang::Backend> backend;  // replaces the scripted backend
};

/// Builds the randomized scene for `seed`.
world::Scene episode_scene(const TaskSpec& task, std::uint64_t seed, const RunOptions& opt);

struct Episode {
  EpisodeResult result;
  std::vector<sched::StepRecord> trace;
};

/// Runs one episode. `hook` (optional) sees the engine before the instruction
/// is issued, e.g. to install an on_solve observer.
Episode run_episode(const TaskSpec& task, std::uint64_t seed, const RunOptions& opt,
                    const std::function<void(sched::Engine&)>& hook = {});

struct TaskSummary {
  std::string task;
  int n = 0;
  double sr = 0, co = 0, pl = 0, cd = 0;  // percentages
  double time_mean = 0, time_sd = 0, dist_mean = 0, dist_sd = 0;
};

TaskSummary summarize(const std::string& task, const std::vector<EpisodeResult>& results);

struct SuiteResult {
  std::vector<TaskSummary> summaries;
  std::vector<EpisodeResult> episodes;
};

/// `reps` episodes per task with seeds seed0, seed0+1, ...
SuiteResult run_suite(const std::vector<const TaskSpec*>& tasks, int reps, std::uint64_t seed0, const RunOptions& opt);

std::string to_csv(const std::vector<TaskSummary>& rows);
std::string to_text(const std::vector<TaskSummary>& rows);

/// One JSON line per step after a header line.
std::string trace_jsonl(const TaskSpec& task, std::uint64_t seed, const world::Scene& scene,
                        const std::vector<sched::StepRecord>& trace, const EpisodeResult& result);

}  // namespace langmpc::bench
