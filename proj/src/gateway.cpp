#include "langmpc/gateway.hpp"

// Eigen must come before httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "langmpc/bench.hpp"
#include "langmpc/engine.hpp"

#include <httplib.h>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <thread>

#include <json.hpp>

namespace langmpc::gateway {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct BadRequest : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json vec_json(const Eigen::Ref<const Eigen::VectorXd>& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json world_json(const world::World& w) {
  json robots = json::array();
  for (const auto& r : w.state().robots) {
    json jr{{"name", r.name}, {"pose", vec_json(r.pose)}, {"gripper_open", r.gripper_open}};
    jr["attached"] = r.attached ? json(*r.attached) : json(nullptr);
    robots.push_back(std::move(jr));
  }
  const json scene = world::to_json(w.scene());
  json objects = json::array();
  for (size_t i = 0; i < w.state().objects.size(); ++i) {
    const auto& o = w.state().objects[i];
    json jo = scene["objects"][i];
    jo["pose"] = vec_json(o.pose);
    objects.push_back(std::move(jo));
  }
  return {{"t", w.state().t}, {"robots", robots}, {"objects", objects}, {"params", w.state().params}};
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json j = json::parse(req.body, nullptr, false);
  if (j.is_discarded()) throw BadRequest("request body is not valid JSON");
  if (!j.is_object()) throw BadRequest("request body must be a JSON object");
  return j;
}

std::string required_text(const json& body) {
  if (!body.contains("text") || !body["text"].is_string()) throw BadRequest("'text' (string) is required");
  const std::string text = body["text"].get<std::string>();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) throw BadRequest("'text' must not be empty");
  return text;
}

std::string new_id() {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  static const char* hex = "0123456789abcdef";
  std::string id;
  std::uint64_t v = rng();
  for (int i = 0; i < 16; ++i, v >>= 4) id += hex[v & 15];
  return id;
}

}  // namespace

// ---------------------------------------------------------------------------

class Session {
 public:
  enum class CommandKind { Instruct, FeedbackPlan, FeedbackSubtask, Pause, Resume };
  struct Command {
    CommandKind kind;
    std::string text;
  };

  Session(std::string id, world::Scene scene, std::shared_ptr<lang::LanguageModule> language,
          sched::EngineConfig cfg, double speed, std::string trace_path, std::size_t history_limit)
      : id_(std::move(id)),
        engine_(std::move(scene), std::move(language), cfg),
        speed_(speed),
        history_limit_(history_limit) {
    if (!trace_path.empty()) {
      if (fs::path(trace_path).has_parent_path()) fs::create_directories(fs::path(trace_path).parent_path());
      trace_.open(trace_path);
      if (!trace_) throw BadRequest("cannot open trace file '" + trace_path + "'");
      trace_ << json{{"v", 1}, {"type", "header"}, {"session", id_}, {"scene", world::to_json(engine_.world().scene())}}
                    .dump()
             << '\n';
    }
    refresh_snapshot();
    thread_ = std::thread([this] { loop(); });
  }

  ~Session() { shutdown(); }

  void shutdown() {
    {
      std::lock_guard lock(mu_);
      if (stop_) return;
      stop_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
  }

  const std::string& id() const { return id_; }

  // Returns an HTTP status: 202 accepted, 409 conflict.
  int submit_instruct(const std::string& text) {
    std::lock_guard lock(mu_);
    if (status_ == "Planning" || status_ == "Executing" || status_ == "AwaitingFeedback")
      return 409;
    status_ = "Planning";
    snapshot_["status"] = status_;
    queue_.push_back({CommandKind::Instruct, text});
    cv_.notify_all();
    return 202;
  }

  int submit_feedback(const std::string& text, bool plan_level) {
    std::lock_guard lock(mu_);
    if (status_ != "Executing" && status_ != "AwaitingFeedback") return 409;
    queue_.push_back({plan_level ? CommandKind::FeedbackPlan : CommandKind::FeedbackSubtask, text});
    cv_.notify_all();
    return 202;
  }

  void submit(CommandKind k) {
    std::lock_guard lock(mu_);
    queue_.push_back({k, {}});
    cv_.notify_all();
  }

  json snapshot() const {
    std::lock_guard lock(mu_);
    return snapshot_;
  }

  /// Messages with seq >= from, waiting up to `timeout` for at least one.
  /// `finished` is set when the episode is over and everything was returned.
  std::vector<std::string> read(long from, std::chrono::milliseconds timeout, bool& finished) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return stop_ || next_seq_ > from; });
    std::vector<std::string> out;
    const long first = next_seq_ - static_cast<long>(history_.size());
    for (long s = std::max(from, first); s < next_seq_; ++s) out.push_back(history_[s - first]);
    finished = stop_ || ((status_ == "Done" || status_ == "Failed") && queue_.empty() && !busy_);
    return out;
  }

  long next_seq() const {
    std::lock_guard lock(mu_);
    return next_seq_;
  }

 private:
  bool running_locked() const { return engine_status_ == sched::Status::Executing && !paused_; }

  void publish(json body) {
    {
      std::lock_guard lock(mu_);
      body["v"] = 1;
      body["seq"] = next_seq_++;
      history_.push_back(body.dump());
      while (history_.size() > history_limit_) history_.pop_front();
    }
    cv_.notify_all();
  }

  void publish_events(const std::vector<sched::Event>& events, const char* cause) {
    json arr = json::array();
    for (const auto& e : events) {
      arr.push_back(sched::to_json(e));
      events_tail_.push_back(arr.back());
    }
    while (events_tail_.size() > 50) events_tail_.pop_front();
    publish({{"type", "events"}, {"cause", cause}, {"status", status_name()}, {"events", arr}});
  }

  std::string status_name() const { return sched::to_string(engine_.status()); }

  void refresh_snapshot(const char* override_status = nullptr) {
    json s;
    s["id"] = id_;
    s["instruction"] = engine_.instruction();
    s["plan"] = engine_.plan();
    s["cursor"] = engine_.cursor();
    s["step"] = engine_.steps();
    s["world"] = world_json(engine_.world());
    if (const auto& sol = engine_.last_solution())
      s["last_solution"] = {{"J", sol->objective},
                            {"violation", sol->violation},
                            {"status", ocp::to_string(sol->status)},
                            {"iterations", sol->iterations}};
    else
      s["last_solution"] = nullptr;
    if (const auto& od = engine_.active_objective())
      s["objective"] = {{"objective", od->objective},
                        {"equality_constraints", od->equality_constraints},
                        {"inequality_constraints", od->inequality_constraints}};
    else
      s["objective"] = nullptr;
    s["events_tail"] = json(std::vector<json>(events_tail_.begin(), events_tail_.end()));
    const std::string status = override_status ? override_status : status_name();
    std::lock_guard lock(mu_);
    engine_status_ = engine_.status();
    // An accepted instruct stays "Planning" until the loop picks it up.
    const bool pending_instruct = !queue_.empty() && queue_.front().kind == CommandKind::Instruct && !override_status;
    status_ = pending_instruct ? "Planning" : status;
    s["status"] = status_;
    s["paused"] = paused_;
    s["seq"] = next_seq_;
    snapshot_ = std::move(s);
  }

  void handle(const Command& c) {
    switch (c.kind) {
      case CommandKind::Instruct: {
        refresh_snapshot("Planning");
        std::vector<sched::Event> ev;
        try {
          ev = engine_.instruct(c.text);
        } catch (const std::logic_error& e) {
          publish({{"type", "error"}, {"message", e.what()}});
          break;
        }
        publish_events(ev, "instruct");
        break;
      }
      case CommandKind::FeedbackPlan:
      case CommandKind::FeedbackSubtask: {
        refresh_snapshot("AwaitingFeedback");
        publish({{"type", "status"}, {"status", "AwaitingFeedback"}, {"feedback", c.text}});
        try {
          const auto ev = c.kind == CommandKind::FeedbackPlan ? engine_.feedback_plan(c.text)
                                                              : engine_.feedback_subtask(c.text);
          publish_events(ev, c.kind == CommandKind::FeedbackPlan ? "feedback_plan" : "feedback_subtask");
        } catch (const std::logic_error& e) {
          publish({{"type", "error"}, {"message", e.what()}, {"status", status_name()}});
        }
        break;
      }
      case CommandKind::Pause:
        {
          std::lock_guard lock(mu_);
          paused_ = true;
        }
        publish({{"type", "status"}, {"status", status_name()}, {"paused", true}});
        break;
      case CommandKind::Resume:
        {
          std::lock_guard lock(mu_);
          paused_ = false;
        }
        next_deadline_ = Clock::now();
        publish({{"type", "status"}, {"status", status_name()}, {"paused", false}});
        break;
    }
    refresh_snapshot();
  }

  void loop() {
    next_deadline_ = Clock::now();
    for (;;) {
      std::optional<Command> cmd;
      {
        std::unique_lock lock(mu_);
        if (queue_.empty() && !running_locked()) {
          cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
          next_deadline_ = Clock::now();
        }
        if (stop_) break;
        if (!queue_.empty()) {
          cmd = queue_.front();
          busy_ = true;
          queue_.pop_front();
        }
      }
      if (cmd) {
        handle(*cmd);
        std::lock_guard lock(mu_);
        busy_ = false;
        continue;
      }

      const sched::StepRecord rec = engine_.step();
      for (const auto& e : rec.events) events_tail_.push_back(sched::to_json(e));
      while (events_tail_.size() > 50) events_tail_.pop_front();
      const json jr = sched::to_json(rec);
      if (trace_) trace_ << jr.dump() << '\n';
      refresh_snapshot();
      publish({{"type", "step"}, {"step", rec.step}, {"status", status_name()}, {"record", jr}});
      if (trace_ && engine_.status() != sched::Status::Executing) trace_.flush();

      if (speed_ > 0.0) {
        const auto period = std::chrono::duration<double>(engine_.world().config().dt / speed_);
        next_deadline_ += std::chrono::duration_cast<Clock::duration>(period);
        const auto now = Clock::now();
        if (next_deadline_ < now - std::chrono::seconds(1)) next_deadline_ = now;
        std::unique_lock lock(mu_);
        cv_.wait_until(lock, next_deadline_, [&] { return stop_ || !queue_.empty(); });
      }
    }
  }

  std::string id_;
  sched::Engine engine_;  // touched by the loop thread only (and the constructor)
  double speed_;
  std::size_t history_limit_;
  std::ofstream trace_;
  std::deque<json> events_tail_;
  Clock::time_point next_deadline_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Command> queue_;
  std::deque<std::string> history_;
  long next_seq_ = 0;
  bool stop_ = false;
  bool paused_ = false;
  bool busy_ = false;
  std::string status_ = "Idle";
  sched::Status engine_status_ = sched::Status::Idle;
  json snapshot_;
  std::thread thread_;
};

// ---------------------------------------------------------------------------

struct Gateway::Impl {
  ServerOptions opt;
  httplib::Server server;
  mutable std::mutex mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  explicit Impl(ServerOptions o) : opt(std::move(o)) { routes(); }

  ~Impl() {
    server.stop();
    std::lock_guard lock(mu);
    for (auto& [id, s] : sessions) s->shutdown();
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::lock_guard lock(mu);
    auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }

  std::string resolve(const std::string& path) const {
    if (fs::exists(path)) return path;
    const fs::path alt = fs::path(opt.asset_dir) / path;
    if (fs::path(path).is_relative() && fs::exists(alt)) return alt.string();
    throw BadRequest("file not found: " + path);
  }

  std::shared_ptr<Session> create(const json& body) {
    const bench::TaskSpec* task = nullptr;
    if (body.contains("task")) {
      if (!body["task"].is_string()) throw BadRequest("'task' must be a string");
      task = bench::find_task(body["task"].get<std::string>());
      if (!task) throw BadRequest("unknown task '" + body["task"].get<std::string>() + "'");
    }

    world::Scene scene;
    try {
      if (body.contains("scene") && body["scene"].is_object())
        scene = world::parse_scene(body["scene"]);
      else if (body.contains("scene") && body["scene"].is_string())
        scene = world::load_scene(resolve(body["scene"].get<std::string>()));
      else if (task)
        scene = world::load_scene(fs::path(opt.asset_dir) / task->scene);
      else
        throw BadRequest("'scene' (path or object) is required");
    } catch (const world::SceneError& e) {
      throw BadRequest(e.what());
    }

    const json cfg = body.value("config", json::object());
    if (!cfg.is_object()) throw BadRequest("'config' must be an object");
    sched::EngineConfig ec;
    double speed = opt.default_speed;
    std::string trace_path;
    try {
      if (cfg.contains("seed")) {
        const auto seed = cfg["seed"].get<std::uint64_t>();
        world::randomize(scene, seed);
        ec.world.seed = seed;
      }
      ec.transition.eps1 = cfg.value("eps1", ec.transition.eps1);
      ec.transition.eps2 = cfg.value("eps2", ec.transition.eps2);
      ec.transition.t_max = cfg.value("t_max", ec.transition.t_max);
      ec.ocp.horizon = cfg.value("horizon", ec.ocp.horizon);
      ec.world.dt = cfg.value("dt", ec.world.dt);
      ec.world.u_max_pos = cfg.value("u_max", ec.world.u_max_pos);
      ec.world.jitter_sigma = cfg.value("jitter", 0.0);
      ec.constrained = cfg.value("constrained", true);
      const std::string mode = cfg.value("mode", "kinematic");
      if (mode != "kinematic" && mode != "tracked") throw BadRequest("mode must be kinematic or tracked");
      ec.world.mode = mode == "tracked" ? world::Mode::Tracked : world::Mode::Kinematic;
      speed = cfg.value("speed", speed);
      trace_path = cfg.value("trace", "");
    } catch (const json::exception& e) {
      throw BadRequest(std::string("config: ") + e.what());
    } catch (const world::SceneError& e) {
      throw BadRequest(e.what());
    }
    if (!(ec.transition.eps1 > 0 && ec.transition.eps2 > 0 && ec.transition.t_max > 0 && ec.ocp.horizon > 0 &&
          ec.world.dt > 0 && ec.world.u_max_pos > 0 && speed >= 0 && ec.world.jitter_sigma >= 0))
      throw BadRequest("config values must be positive");

    const std::string backend_name = body.value("backend", "scripted");
    std::shared_ptr<lang::Backend> backend;
    try {
      if (backend_name == "chat") {
        backend = std::make_shared<lang::ChatBackend>(lang::ChatConfig::from_env());
      } else if (backend_name == "scripted") {
        if (body.contains("script") && body["script"].is_array())
          backend = std::make_shared<lang::ScriptedBackend>(lang::ScriptedBackend::from_json_text(body["script"].dump()));
        else if (body.contains("script") && body["script"].is_string())
          backend = std::make_shared<lang::ScriptedBackend>(
              lang::ScriptedBackend::load(resolve(body["script"].get<std::string>())));
        else if (task)
          backend = std::make_shared<lang::ScriptedBackend>(
              lang::ScriptedBackend::load((fs::path(opt.asset_dir) / task->script).string()));
        else
          throw BadRequest("scripted backend needs 'script' (path or list)");
      } else {
        throw BadRequest("backend must be scripted or chat");
      }
    } catch (const lang::BackendError& e) {
      throw BadRequest(e.what());
    }

    std::string family = task ? task->family : "cubes";
    if (body.contains("family")) {
      if (!body["family"].is_string()) throw BadRequest("'family' must be a string");
      family = body["family"].get<std::string>();
    }
    std::shared_ptr<const lang::PromptLibrary> prompts;
    try {
      prompts = std::make_shared<const lang::PromptLibrary>(lang::PromptLibrary::load(opt.asset_dir + "/prompts"));
      (void)prompts->system(family, lang::Role::TP, true);
    } catch (const std::exception& e) {
      throw BadRequest(std::string("prompts: ") + e.what());
    }
    auto language = std::make_shared<lang::LanguageModule>(backend, prompts, family, ec.constrained);
    auto s = std::make_shared<Session>(new_id(), std::move(scene), language, ec, speed, trace_path, opt.history_limit);
    std::lock_guard lock(mu);
    sessions[s->id()] = s;
    return s;
  }

  template <class F>
  static void guarded(httplib::Response& res, F&& f) {
    try {
      f();
    } catch (const BadRequest& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  }

  void with_session(const httplib::Request& req, httplib::Response& res,
                    const std::function<void(const std::shared_ptr<Session>&)>& f) {
    auto s = find(req.matches[1]);
    if (!s) return send_error(res, 404, "unknown session");
    guarded(res, [&] { f(s); });
  }

  void routes() {
    server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send_json(res, 200, {{"ok", true}}); });

    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        auto s = create(parse_body(req));
        send_json(res, 201, {{"session_id", s->id()}});
      });
    });

    server.Get("/sessions", [this](const httplib::Request&, httplib::Response& res) {
      json ids = json::array();
      std::lock_guard lock(mu);
      for (const auto& [id, s] : sessions) ids.push_back(id);
      send_json(res, 200, {{"sessions", ids}});
    });

    server.Post(R"(/sessions/([^/]+)/instruct)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) {
        const std::string text = required_text(parse_body(req));
        const int code = s->submit_instruct(text);
        if (code == 409) return send_error(res, 409, "an instruction is already being executed");
        send_json(res, 202, {{"accepted", true}});
      });
    });

    server.Post(R"(/sessions/([^/]+)/feedback)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) {
        const json body = parse_body(req);
        const std::string text = required_text(body);
        const std::string level = body.value("level", "subtask");
        if (level != "plan" && level != "subtask") throw BadRequest("'level' must be plan or subtask");
        if (s->submit_feedback(text, level == "plan") == 409)
          return send_error(res, 409, "feedback needs an executing episode");
        send_json(res, 202, {{"accepted", true}, {"level", level}});
      });
    });

    server.Post(R"(/sessions/([^/]+)/pause)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) {
        s->submit(Session::CommandKind::Pause);
        send_json(res, 200, {{"paused", true}});
      });
    });

    server.Post(R"(/sessions/([^/]+)/resume)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) {
        s->submit(Session::CommandKind::Resume);
        send_json(res, 200, {{"paused", false}});
      });
    });

    server.Get(R"(/sessions/([^/]+)/state)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) { send_json(res, 200, s->snapshot()); });
    });

    server.Get(R"(/sessions/([^/]+)/stream)", [this](const httplib::Request& req, httplib::Response& res) {
      with_session(req, res, [&](const auto& s) {
        long from = 0;
        if (req.has_param("from")) {
          try {
            from = std::stol(req.get_param_value("from"));
          } catch (const std::exception&) {
            throw BadRequest("'from' must be an integer");
          }
          if (from < 0) throw BadRequest("'from' must be non-negative");
        }
        const bool follow = req.has_param("follow") && req.get_param_value("follow") != "0";
        auto cursor = std::make_shared<long>(from);
        res.set_header("Cache-Control", "no-cache");
        res.set_chunked_content_provider("application/x-ndjson", [s, cursor, follow](size_t, httplib::DataSink& sink) {
          bool finished = false;
          const auto lines = s->read(*cursor, std::chrono::milliseconds(200), finished);
          for (const auto& line : lines) {
            const std::string framed = line + "\n";
            if (!sink.write(framed.data(), framed.size())) return false;
            ++*cursor;
          }
          if (finished && !follow && *cursor >= s->next_seq()) sink.done();
          return true;
        });
      });
    });

    server.Delete(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::shared_ptr<Session> s;
      {
        std::lock_guard lock(mu);
        auto it = sessions.find(req.matches[1]);
        if (it != sessions.end()) {
          s = it->second;
          sessions.erase(it);
        }
      }
      if (!s) return send_error(res, 404, "unknown session");
      s->shutdown();
      send_json(res, 200, {{"deleted", s->id()}});
    });

    if (!opt.ui_dir.empty() && fs::is_directory(opt.ui_dir)) {
      server.set_mount_point("/ui", opt.ui_dir);
      server.Get("/ui", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui/index.html"); });
    } else {
      server.Get(R"(/ui(/.*)?)", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(
            "<!doctype html><html><head><title>console</title></head><body>"
            "<p>The operator console bundle is not installed. Start the gateway with <code>--ui DIR</code>.</p>"
            "</body></html>",
            "text/html");
      });
    }
    server.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui"); });
  }
};

Gateway::Gateway(ServerOptions opt) : impl_(std::make_unique<Impl>(std::move(opt))) {}
Gateway::~Gateway() = default;

bool Gateway::listen() { return impl_->server.listen(impl_->opt.host, impl_->opt.port); }

int Gateway::bind_any_port() { return impl_->server.bind_to_any_port(impl_->opt.host); }

bool Gateway::listen_after_bind() { return impl_->server.listen_after_bind(); }

void Gateway::wait_until_ready() { impl_->server.wait_until_ready(); }

void Gateway::stop() { impl_->server.stop(); }

std::size_t Gateway::session_count() const {
  std::lock_guard lock(impl_->mu);
  return impl_->sessions.size();
}

}  // namespace langmpc::gateway
