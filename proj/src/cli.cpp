#include "langmpc/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "langmpc/autodiff.hpp"
#include "langmpc/bench.hpp"
#include "langmpc/gateway.hpp"

#ifndef LANGMPC_DEFAULT_ASSET_DIR
#define LANGMPC_DEFAULT_ASSET_DIR "assets"
#endif

namespace langmpc::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_assets() {
  if (const char* env = std::getenv("LANGMPC_ASSETS")) return env;
  return LANGMPC_DEFAULT_ASSET_DIR;
}

// Relative paths are tried as given, then under the asset directory.
std::string resolve(const std::string& path, const std::string& assets, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing ") + what);
  if (fs::exists(path)) return path;
  const fs::path alt = fs::path(assets) / path;
  if (fs::path(path).is_relative() && fs::exists(alt)) return alt.string();
  throw ConfigError(std::string(what) + " not found: " + path);
}

struct RunConfig {
  std::string scene, instruction, backend = "scripted", script, family, task;
  double eps1 = 1e-3, eps2 = 1e-4;
  int t_max = 200;
  int horizon = 15;
  double dt = 0.1, u_max = 0.5;
  std::string mode = "kinematic";
  std::uint64_t seed = 0;
  std::string out = "out";
  long max_steps = 20000;
  bool constrained = true;
  double jitter = 0.0;
};

void apply_json(RunConfig& c, const json& j) {
  auto take = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j[key].get<std::decay_t<decltype(field)>>();
  };
  take("scene", c.scene);
  take("instruction", c.instruction);
  take("backend", c.backend);
  take("script", c.script);
  take("family", c.family);
  take("task", c.task);
  take("eps1", c.eps1);
  take("eps2", c.eps2);
  take("t_max", c.t_max);
  take("horizon", c.horizon);
  take("dt", c.dt);
  take("u_max", c.u_max);
  take("mode", c.mode);
  take("seed", c.seed);
  take("out", c.out);
  take("max_steps", c.max_steps);
  take("constrained", c.constrained);
  take("jitter", c.jitter);
}

void validate(const RunConfig& c) {
  if (!(c.eps1 > 0 && c.eps2 > 0 && c.t_max > 0 && c.horizon > 0 && c.dt > 0 && c.u_max > 0 && c.max_steps > 0))
    throw ConfigError("numeric parameters must be positive");
  if (c.jitter < 0) throw ConfigError("jitter must be non-negative");
  if (c.mode != "kinematic" && c.mode != "tracked") throw ConfigError("mode must be kinematic or tracked");
  if (c.backend != "scripted" && c.backend != "chat") throw ConfigError("backend must be scripted or chat");
}

sched::EngineConfig engine_config(const RunConfig& c) {
  sched::EngineConfig e;
  e.transition.eps1 = c.eps1;
  e.transition.eps2 = c.eps2;
  e.transition.t_max = c.t_max;
  e.ocp.horizon = c.horizon;
  e.world.dt = c.dt;
  e.world.u_max_pos = c.u_max;
  e.world.mode = c.mode == "tracked" ? world::Mode::Tracked : world::Mode::Kinematic;
  e.world.jitter_sigma = c.jitter;
  e.constrained = c.constrained;
  return e;
}

std::shared_ptr<lang::Backend> make_chat_backend() {
  try {
    return std::make_shared<lang::ChatBackend>(lang::ChatConfig::from_env());
  } catch (const lang::BackendError& e) {
    throw ConfigError(e.what());
  }
}

// Registers the RunConfig flags; values given on the command line win over the
// config file.
struct RunFlags {
  RunConfig v;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> opts;
  std::string config_file;

  template <class T>
  void add(CLI::App* app, const std::string& name, T RunConfig::*field, const std::string& help) {
    auto* o = app->add_option(name, v.*field, help);
    opts.emplace_back(o, [this, field](RunConfig& c) { c.*field = v.*field; });
  }

  void attach(CLI::App* app, bool with_scene) {
    app->add_option("--config", config_file, "JSON run configuration; flags override its fields");
    if (with_scene) {
      add(app, "--scene", &RunConfig::scene, "scene file");
      add(app, "--instruct", &RunConfig::instruction, "instruction for the task planner");
      add(app, "--task", &RunConfig::task, "registered task (fills scene, script, family, instruction)");
      add(app, "--script", &RunConfig::script, "scripted backend transcript");
      add(app, "--family", &RunConfig::family, "prompt family");
      add(app, "--max-steps", &RunConfig::max_steps, "step budget for the episode");
      add(app, "--jitter", &RunConfig::jitter, "std-dev of observed object positions [m]");
    }
    add(app, "--backend", &RunConfig::backend, "scripted | chat");
    add(app, "--eps1", &RunConfig::eps1, "cost threshold for advancing");
    add(app, "--eps2", &RunConfig::eps2, "cost-change threshold for advancing");
    add(app, "--t-max", &RunConfig::t_max, "steps per subtask before forced advance");
    add(app, "--horizon", &RunConfig::horizon, "MPC horizon N");
    add(app, "--dt", &RunConfig::dt, "control period [s]");
    add(app, "--u-max", &RunConfig::u_max, "translational velocity bound [m/s]");
    add(app, "--mode", &RunConfig::mode, "kinematic | tracked");
    add(app, "--seed", &RunConfig::seed, "layout and noise seed");
    add(app, "--out", &RunConfig::out, "output directory");
  }

  RunConfig resolve_config() const {
    RunConfig c;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ConfigError("cannot open config file '" + config_file + "'");
      try {
        apply_json(c, json::parse(in));
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config file: ") + e.what());
      }
    }
    for (const auto& [o, set] : opts)
      if (o->count() > 0) set(c);
    return c;
  }
};

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << text;
}

json result_json(const bench::EpisodeResult& r) {
  json failures = json::array();
  for (auto f : r.failures) failures.push_back(sched::to_string(f));
  return {{"task", r.task},       {"seed", r.seed},          {"success", r.success}, {"predicate", r.predicate},
          {"failures", failures}, {"status", r.status},      {"reason", r.reason},   {"steps", r.steps},
          {"time", r.time_s},     {"path_length", r.path_length}};
}

int cmd_run(const RunFlags& flags, const std::string& assets, std::ostream& out) {
  RunConfig c = flags.resolve_config();
  validate(c);

  bench::TaskSpec task;
  const bench::TaskSpec* known = nullptr;
  if (!c.task.empty()) {
    known = bench::find_task(c.task);
    if (!known) throw ConfigError("unknown task '" + c.task + "'");
  }
  if (!c.scene.empty()) {
    const std::string scene_path = resolve(c.scene, assets, "scene file");
    if (!known) known = bench::find_task(fs::path(scene_path).stem().string());
    if (known) task = *known;
    task.scene = fs::absolute(scene_path).string();
  } else if (known) {
    task = *known;
    task.scene = fs::absolute(fs::path(assets) / known->scene).string();
  } else {
    throw ConfigError("missing scene file (use --scene or --task)");
  }
  if (!known) throw ConfigError("no success predicate for scene '" + c.scene + "'; pass --task");
  if (!c.instruction.empty()) task.instruction = c.instruction;
  if (!c.family.empty()) task.family = c.family;

  bench::RunOptions opt;
  opt.asset_dir = assets;
  opt.engine = engine_config(c);
  opt.constrained = c.constrained;
  opt.max_steps = c.max_steps;
  if (c.backend == "chat") {
    opt.backend = make_chat_backend();
  } else {
    const std::string script = c.script.empty() ? fs::path(assets) / task.script : fs::path(c.script);
    opt.script_override = fs::absolute(resolve(c.script.empty() ? script : c.script, assets, "script file")).string();
    try {
      (void)lang::ScriptedBackend::load(opt.script_override);
    } catch (const lang::BackendError& e) {
      throw ConfigError(e.what());
    }
  }
  // run_episode joins asset_dir with task.scene; an absolute scene path wins.
  const bench::Episode ep = bench::run_episode(task, c.seed, opt);
  const world::Scene scene = bench::episode_scene(task, c.seed, opt);

  const fs::path dir(c.out);
  write_file(dir / "trace.jsonl", bench::trace_jsonl(task, c.seed, scene, ep.trace, ep.result));
  write_file(dir / "result.json", result_json(ep.result).dump(2) + "\n");
  out << task.name << " seed " << c.seed << ": " << (ep.result.success ? "success" : "failure");
  if (!ep.result.reason.empty()) out << " (" << ep.result.reason << ")";
  out << "\n  steps " << ep.result.steps << ", time " << ep.result.time_s << " s, path " << ep.result.path_length
      << " m\n  trace " << (dir / "trace.jsonl").string() << "\n";
  return ep.result.success ? kOk : kTaskFailed;
}

std::vector<const bench::TaskSpec*> parse_tasks(const std::string& list) {
  std::vector<const bench::TaskSpec*> out;
  if (list.empty() || list == "all") {
    for (const auto& t : bench::registry()) out.push_back(&t);
    return out;
  }
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto* t = bench::find_task(item);
    if (!t) throw ConfigError("unknown task '" + item + "'");
    out.push_back(t);
  }
  if (out.empty()) throw ConfigError("no tasks selected");
  return out;
}

struct BenchFlags {
  std::string tasks = "all";
  int reps = 50;
  int jobs = 1;
  bool ablation = false;
  bool traces = false;
};

int cmd_bench(const RunFlags& flags, const BenchFlags& b, const std::string& assets, std::ostream& out) {
  RunConfig c = flags.resolve_config();
  validate(c);
  if (b.reps <= 0 || b.jobs <= 0) throw ConfigError("--reps and --jobs must be positive");
  const auto tasks = parse_tasks(b.tasks);

  bench::RunOptions opt;
  opt.asset_dir = assets;
  opt.engine = engine_config(c);
  opt.constrained = !b.ablation && c.constrained;
  opt.jobs = b.jobs;
  opt.max_steps = c.max_steps;
  if (b.traces) opt.out_dir = c.out;
  if (c.backend == "chat") opt.backend = make_chat_backend();

  const auto suite = bench::run_suite(tasks, b.reps, c.seed, opt);
  const fs::path dir(c.out);
  write_file(dir / "summary.csv", bench::to_csv(suite.summaries));
  write_file(dir / "summary.txt", bench::to_text(suite.summaries));
  std::string lines;
  for (const auto& r : suite.episodes) lines += result_json(r).dump() + "\n";
  write_file(dir / "episodes.jsonl", lines);
  out << bench::to_text(suite.summaries);
  return kOk;
}

// name=v1,v2,... ; a bare number list binds a vector.
std::pair<std::string, std::vector<double>> parse_binding(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("binding must look like name=1,2,3: " + s);
  std::vector<double> vals;
  std::stringstream ss(s.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      vals.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad number in binding '" + s + "'");
    }
  }
  if (vals.empty()) throw ConfigError("empty binding '" + s + "'");
  return {s.substr(0, eq), vals};
}

std::string vec_text(const Eigen::VectorXd& v) {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v(i);
  return os.str() + ']';
}

int lint_corpus(const std::string& path, std::ostream& out, std::ostream& err) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open corpus '" + path + "'");
  json corpus;
  try {
    corpus = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("corpus: ") + e.what());
  }
  int plans = 0, exprs = 0, errors = 0;
  for (const auto& t : corpus.value("tasks", json::array())) {
    const std::string name = t.value("name", "?");
    try {
      lang::parse_tp(t.at("plan").get<std::string>());
      ++plans;
    } catch (const std::exception& e) {
      ++errors;
      err << name << " plan: " << e.what() << "\n";
    }
    expr::SymbolTable symbols(t.value("robots", std::vector<std::string>{""}));
    for (const auto& o : t.value("objects", std::vector<std::string>{})) symbols.add_object(o);
    for (const auto& p : t.value("params", std::vector<std::string>{})) symbols.add_param(p);
    for (const auto& o : t.value("optimizations", json::array())) {
      lang::OdResponse od;
      try {
        od = lang::parse_od(o.get<std::string>());
      } catch (const std::exception& e) {
        ++errors;
        err << name << " optimization: " << e.what() << "\n";
        continue;
      }
      std::vector<std::string> all{od.objective};
      all.insert(all.end(), od.equality_constraints.begin(), od.equality_constraints.end());
      all.insert(all.end(), od.inequality_constraints.begin(), od.inequality_constraints.end());
      for (const auto& s : all) {
        try {
          const auto e = expr::parse(s);
          expr::typecheck_scalar(*e, symbols);
          const auto back = expr::parse(expr::pretty(*e));
          if (!expr::same_structure(*e, *back)) throw std::runtime_error("pretty-print does not round-trip");
          ++exprs;
        } catch (const expr::ExprError& e) {
          ++errors;
          err << name << ": " << s << "\n  " << e.what() << " at [" << e.span().begin << ", " << e.span().end << ")\n";
        } catch (const std::exception& e) {
          ++errors;
          err << name << ": " << s << "\n  " << e.what() << "\n";
        }
      }
    }
  }
  out << plans << " plans, " << exprs << " expressions, " << errors << " errors\n";
  return errors == 0 ? kOk : kTaskFailed;
}

int cmd_expr(const std::string& text, const std::vector<std::string>& binds, const std::string& robots_csv,
             const std::string& lint, std::ostream& out, std::ostream& err) {
  if (!lint.empty()) return lint_corpus(lint, out, err);
  if (text.empty()) throw ConfigError("give an expression or --lint <corpus>");
  std::vector<std::string> robots;
  {
    std::stringstream ss(robots_csv);
    std::string r;
    while (std::getline(ss, r, ',')) robots.push_back(r);
    if (robots.empty()) robots.push_back("");
  }
  expr::SymbolTable symbols(robots);
  std::vector<std::pair<std::string, std::vector<double>>> values;
  for (const auto& b : binds) {
    auto kv = parse_binding(b);
    if (!symbols.contains(kv.first)) {
      if (kv.second.size() == 1)
        symbols.add_param(kv.first);
      else if (kv.second.size() == 4)
        symbols.add_object(kv.first);
      else
        throw ConfigError("'" + kv.first + "' needs 1 or 4 values");
    }
    values.push_back(std::move(kv));
  }
  try {
    const auto e = expr::parse(text);
    expr::typecheck_scalar(*e, symbols);
    ad::EvalContext ctx(symbols);
    for (const auto& [name, v] : values) ctx.bind(symbols, name, v);
    const auto d = ad::diff(*e, symbols, ctx);
    out << "expr:   " << expr::pretty(*e) << "\nvalue:  " << d.value << "\n";
    for (int r = 0; r < symbols.robot_count(); ++r) {
      out << "d/d" << symbols.state_name(r) << ": " << vec_text(d.grad_x.segment(4 * r, 4)) << "\n";
      if (d.grad_u.segment(4 * r, 4).cwiseAbs().maxCoeff() > 0)
        out << "d/d" << symbols.input_name(r) << ": " << vec_text(d.grad_u.segment(4 * r, 4)) << "\n";
    }
    if (d.kink) out << "note: evaluated at a nonsmooth point\n";
  } catch (const expr::ExprError& e) {
    err << "error: " << e.what() << "\n  " << text << "\n  " << std::string(e.span().begin, ' ')
        << std::string(std::max<size_t>(1, e.span().end - e.span().begin), '^') << "\n";
    return kTaskFailed;
  }
  return kOk;
}

int cmd_replay(const std::string& path, const std::string& format, const std::string& out_dir, std::ostream& out) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open trace '" + path + "'");
  if (format != "text" && format != "csv") throw ConfigError("format must be text or csv");
  std::ostringstream dump;
  std::string line;
  int n = 0;
  if (format == "csv") dump << "step,t,cursor,kind,J,violation,status,x,events\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError("trace line " + std::to_string(n + 1) + ": " + e.what());
    }
    ++n;
    const std::string type = j.value("type", "step");
    if (type == "header") {
      if (format == "text")
        dump << "# " << j.value("task", "") << " seed " << j.value("seed", 0) << ": " << j.value("instruction", "")
             << "\n";
      continue;
    }
    if (type == "result") {
      if (format == "text")
        dump << "# result: " << (j.value("success", false) ? "success" : "failure") << " after "
             << j.value("steps", 0) << " steps\n";
      continue;
    }
    std::string events;
    for (const auto& e : j.value("events", json::array())) events += (events.empty() ? "" : ";") + e.value("kind", "");
    std::ostringstream x;
    for (const auto& v : j.value("x", json::array())) x << (x.tellp() > 0 ? " " : "") << std::setprecision(4) << v.get<double>();
    const auto num = [](const json& v) {
      std::ostringstream os;
      if (!v.is_null()) os << std::setprecision(6) << v.get<double>();
      return os.str();
    };
    if (format == "csv") {
      dump << j.value("step", 0) << ',' << j.value("t", 0.0) << ',' << j.value("cursor", 0) << ','
           << j.value("kind", "") << ',' << num(j.value("J", json())) << ',' << num(j.value("violation", json()))
           << ',' << j.value("status", "") << ",\"" << x.str() << "\"," << events << "\n";
    } else {
      dump << std::setw(5) << j.value("step", 0) << "  t=" << std::fixed << std::setprecision(1) << j.value("t", 0.0)
           << std::defaultfloat << "  [" << j.value("cursor", 0) << "] " << std::setw(7) << j.value("kind", "");
      if (!j.value("J", json()).is_null()) dump << "  J=" << num(j["J"]);
      dump << "  x=(" << x.str() << ")";
      if (!events.empty()) dump << "  " << events;
      dump << "\n";
    }
  }
  out << dump.str();
  if (!out_dir.empty()) write_file(fs::path(out_dir) / (format == "csv" ? "replay.csv" : "replay.txt"), dump.str());
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Language-conditioned MPC engine"};
  app.require_subcommand(1);
  std::string assets = default_assets();
  app.add_option("--assets", assets, "asset directory (scenes, scripts, prompts)");

  RunFlags run_flags;
  auto* run_cmd = app.add_subcommand("run", "run one episode");
  run_flags.attach(run_cmd, true);
  auto* unconstrained = run_cmd->add_flag("--unconstrained", "strip designer constraints");

  RunFlags bench_flags;
  BenchFlags bench;
  auto* bench_cmd = app.add_subcommand("bench", "run the benchmark suite");
  bench_flags.attach(bench_cmd, false);
  bench_cmd->add_option("--tasks", bench.tasks, "comma-separated task names or 'all'");
  bench_cmd->add_option("--reps", bench.reps, "episodes per task");
  bench_cmd->add_option("--jobs", bench.jobs, "parallel episodes");
  bench_cmd->add_flag("--ablation", bench.ablation, "constraint-stripped designer");
  bench_cmd->add_flag("--traces", bench.traces, "write one JSONL trace per episode");

  std::string expr_text, robots, lint;
  std::vector<std::string> binds;
  auto* expr_cmd = app.add_subcommand("expr", "evaluate an expression and its gradient");
  expr_cmd->add_option("expression", expr_text, "expression text");
  expr_cmd->add_option("--bind", binds, "name=v1,v2,... (repeatable)");
  expr_cmd->add_option("--robots", robots, "comma-separated robot names (default: single robot)");
  expr_cmd->add_option("--lint", lint, "check every plan and expression of a corpus file ('corpus': the bundled one)");

  std::string trace_path, format = "text", replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "render a trace as a per-step dump");
  replay_cmd->add_option("trace", trace_path, "trace file")->required();
  replay_cmd->add_option("--format", format, "text | csv");
  replay_cmd->add_option("--out", replay_out, "also write the dump under this directory");

  gateway::ServerOptions serve_opt;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP gateway for the operator console");
  serve_cmd->add_option("--host", serve_opt.host, "bind address");
  serve_cmd->add_option("--port", serve_opt.port, "bind port");
  serve_cmd->add_option("--ui", serve_opt.ui_dir, "static console bundle served at /ui");
  serve_cmd->add_option("--speed", serve_opt.default_speed, "real-time multiplier (0: unthrottled)");

  try {
    // `expr ... -- "-x[2]"`: CLI11 drops a positional after "--" once an
    // option has been seen, so the expression is lifted out by hand.
    std::vector<std::string> rest = args;
    const auto dd = std::find(rest.begin(), rest.end(), "--");
    if (dd != rest.end() && std::find(rest.begin(), dd, "expr") != dd && dd + 1 != rest.end()) {
      expr_text = *(dd + 1);
      rest.erase(dd, dd + 2);
    }
    std::vector<std::string> rev(rest.rbegin(), rest.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    if (*run_cmd) {
      if (*unconstrained) run_flags.opts.emplace_back(unconstrained, [](RunConfig& c) { c.constrained = false; });
      return cmd_run(run_flags, assets, out);
    }
    if (*bench_cmd) return cmd_bench(bench_flags, bench, assets, out);
    if (*expr_cmd) {
      // "--lint corpus" names the bundled example corpus.
      const std::string corpus = lint == "corpus" ? (fs::path(assets) / "corpus/appendix.json").string()
                                 : lint.empty()   ? lint
                                                  : resolve(lint, assets, "corpus file");
      return cmd_expr(expr_text, binds, robots, corpus, out, err);
    }
    if (*replay_cmd) return cmd_replay(trace_path, format, replay_out, out);
    if (*serve_cmd) {
      serve_opt.asset_dir = assets;
      gateway::Gateway gw(serve_opt);
      out << "listening on http://" << serve_opt.host << ":" << serve_opt.port << "\n" << std::flush;
      return gw.listen() ? kOk : kConfigError;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const world::SceneError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const lang::BackendError& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace langmpc::cli
