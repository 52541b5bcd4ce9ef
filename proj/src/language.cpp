#include "langmpc/language.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace langmpc::lang {

using nlohmann::json;

const char* to_string(Role r) { return r == Role::TP ? "TP" : "OD"; }

namespace {

std::string trim(std::string_view s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::string join(const std::vector<std::string>& v, const char* sep) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Drops a surrounding ``` fence (with optional language tag).
std::string_view unfence(std::string_view text) {
  const size_t open = text.find("```");
  if (open == std::string_view::npos) return text;
  const size_t body = text.find('\n', open);
  if (body == std::string_view::npos) return text;
  const size_t close = text.find("```", body);
  return text.substr(body + 1, (close == std::string_view::npos ? text.size() : close) - body - 1);
}

std::optional<json> try_json_object(std::string_view text) {
  const size_t a = text.find('{');
  const size_t b = text.rfind('}');
  if (a == std::string_view::npos || b == std::string_view::npos || b < a) return std::nullopt;
  json j = json::parse(text.substr(a, b - a + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

// Reader for the constructor-call surface: Plan(tasks=[...]) and
// Optimization(objective="...", equality_constraints=[...], ...).
class PyScanner {
 public:
  explicit PyScanner(std::string_view s) : s_(s) {}

  // Position just after `key` followed by '=' or ':', or npos.
  bool seek_key(std::string_view key) {
    size_t from = 0;
    while (true) {
      const size_t at = s_.find(key, from);
      if (at == std::string_view::npos) return false;
      from = at + key.size();
      const bool left_ok = at == 0 || !(std::isalnum(static_cast<unsigned char>(s_[at - 1])) || s_[at - 1] == '_');
      size_t p = from;
      if (p < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[p])) || s_[p] == '_')) continue;
      while (p < s_.size() && std::isspace(static_cast<unsigned char>(s_[p]))) ++p;
      if (left_ok && p < s_.size() && (s_[p] == '=' || s_[p] == ':')) {
        pos_ = p + 1;
        return true;
      }
    }
  }

  void skip_ws() {
    while (pos_ < s_.size() && (std::isspace(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '\\')) ++pos_;
  }

  bool at(char c) {
    skip_ws();
    return pos_ < s_.size() && s_[pos_] == c;
  }

  std::string string_literal() {
    const char q = s_[pos_++];
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != q) {
      char c = s_[pos_++];
      if (c == '\\' && pos_ < s_.size()) {
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          default: c = e;
        }
      }
      out += c;
    }
    if (pos_ >= s_.size()) throw SchemaError("unterminated string literal");
    ++pos_;
    return out;
  }

  // Unquoted expression up to a top-level ',' or closing bracket.
  std::string raw_item() {
    const size_t start = pos_;
    int depth = 0;
    while (pos_ < s_.size()) {
      const char c = s_[pos_];
      if (c == '"' || c == '\'') {
        string_literal();
        continue;
      }
      if (c == '(' || c == '[' || c == '{') ++depth;
      if (c == ')' || c == ']' || c == '}') {
        if (depth == 0) break;
        --depth;
      }
      if (c == ',' && depth == 0) break;
      ++pos_;
    }
    return trim(s_.substr(start, pos_ - start));
  }

  std::string scalar() {
    skip_ws();
    if (pos_ >= s_.size()) throw SchemaError("missing value");
    if (s_[pos_] == '"' || s_[pos_] == '\'') return string_literal();
    return raw_item();
  }

  std::vector<std::string> list() {
    if (!at('[')) throw SchemaError("expected '['");
    ++pos_;
    std::vector<std::string> out;
    while (true) {
      skip_ws();
      if (pos_ >= s_.size()) throw SchemaError("unterminated list");
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      if (s_[pos_] == ',') {
        ++pos_;
        continue;
      }
      std::string item = (s_[pos_] == '"' || s_[pos_] == '\'') ? string_literal() : raw_item();
      if (!item.empty()) out.push_back(std::move(item));
    }
  }

 private:
  std::string_view s_;
  size_t pos_ = 0;
};

std::vector<std::string> string_list(const json& j, const char* key) {
  std::vector<std::string> out;
  if (!j.contains(key) || j[key].is_null()) return out;
  if (!j[key].is_array()) throw SchemaError(std::string("'") + key + "' must be a list");
  for (const auto& e : j[key]) {
    if (!e.is_string()) throw SchemaError(std::string("'") + key + "' entries must be strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

}  // namespace

std::string SceneDescription::text() const {
  std::string out = "Objects: " + join(objects, ", ");
  if (!params.empty()) out += "\nParameters: " + join(params, ", ");
  if (robots.size() > 1) out += "\nRobots: " + join(robots, ", ");
  return out;
}

std::vector<Message> PromptBundle::messages() const {
  std::vector<Message> out;
  out.push_back({"system", system});
  out.insert(out.end(), history.begin(), history.end());
  out.push_back({"user", user});
  return out;
}

std::string PromptBundle::bytes() const {
  json j;
  j["role"] = to_string(role);
  j["system"] = system;
  j["scene"] = scene;
  j["user"] = user;
  j["history"] = json::array();
  for (const auto& m : history) j["history"].push_back({{"role", m.role}, {"content", m.content}});
  return j.dump();
}

TpResponse parse_tp(std::string_view text) {
  const std::string_view body = unfence(text);
  TpResponse r;
  if (auto j = try_json_object(body); j && j->contains("tasks")) {
    r.tasks = string_list(*j, "tasks");
  } else {
    PyScanner sc(body);
    if (!sc.seek_key("tasks")) throw SchemaError("planner response has no task list");
    r.tasks = sc.list();
  }
  if (r.tasks.empty()) throw SchemaError("planner returned an empty task list");
  for (auto& t : r.tasks) {
    t = trim(t);
    if (t.empty()) throw SchemaError("planner returned an empty subtask");
  }
  return r;
}

OdResponse parse_od(std::string_view text) {
  const std::string_view body = unfence(text);
  OdResponse r;
  if (auto j = try_json_object(body); j && j->contains("objective")) {
    if (!(*j)["objective"].is_string()) throw SchemaError("'objective' must be a string");
    r.objective = (*j)["objective"].get<std::string>();
    r.equality_constraints = string_list(*j, "equality_constraints");
    r.inequality_constraints = string_list(*j, "inequality_constraints");
  } else {
    PyScanner sc(body);
    if (!sc.seek_key("objective")) throw SchemaError("designer response has no objective");
    r.objective = sc.scalar();
    PyScanner eq(body);
    if (eq.seek_key("equality_constraints")) r.equality_constraints = eq.list();
    PyScanner in(body);
    if (in.seek_key("inequality_constraints")) r.inequality_constraints = in.list();
  }
  r.objective = trim(r.objective);
  if (r.objective.empty()) throw SchemaError("designer returned an empty objective");
  for (auto* v : {&r.equality_constraints, &r.inequality_constraints})
    for (auto& s : *v) {
      s = trim(s);
      if (s.empty()) throw SchemaError("designer returned an empty constraint");
    }
  return r;
}

std::string to_json_text(const TpResponse& r) { return json{{"tasks", r.tasks}}.dump(); }

std::string to_json_text(const OdResponse& r) {
  return json{{"objective", r.objective},
              {"equality_constraints", r.equality_constraints},
              {"inequality_constraints", r.inequality_constraints}}
      .dump();
}

// ---------------------------------------------------------------------------
// Scripted backend

ScriptedBackend ScriptedBackend::from_json_text(std::string_view text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_array()) throw BackendError("script must be a JSON list of entries");
  ScriptedBackend b;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("role") || !e.contains("pattern") || !e.contains("response"))
      throw BackendError("script entry needs role, pattern and response");
    Entry en;
    const std::string role = e["role"].get<std::string>();
    if (role == "TP" || role == "tp")
      en.role = Role::TP;
    else if (role == "OD" || role == "od")
      en.role = Role::OD;
    else
      throw BackendError("script entry has unknown role '" + role + "'");
    en.pattern = e["pattern"].get<std::string>();
    en.response = e["response"].is_string() ? e["response"].get<std::string>() : e["response"].dump();
    const auto& p = en.pattern;
    if (p.size() >= 2 && p.front() == '/') {
      const size_t end = p.rfind('/');
      if (end > 0) {
        const std::string flags = p.substr(end + 1);
        auto opts = std::regex::ECMAScript;
        if (flags == "i")
          opts |= std::regex::icase;
        else if (!flags.empty())
          throw BackendError("unsupported regex flags in pattern " + p);
        try {
          en.regex = std::regex(p.substr(1, end - 1), opts);
        } catch (const std::regex_error& ex) {
          throw BackendError("bad regex pattern " + p + ": " + ex.what());
        }
      }
    }
    b.entries_.push_back(std::move(en));
  }
  return b;
}

ScriptedBackend ScriptedBackend::load(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw BackendError(e.what());
  }
  return from_json_text(text);
}

int ScriptedBackend::match(Role role, std::string_view user) const {
  for (size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.role != role) continue;
    const bool hit = e.regex ? std::regex_search(user.begin(), user.end(), *e.regex)
                             : user.find(e.pattern) != std::string_view::npos;
    if (hit) return static_cast<int>(i);
  }
  return -1;
}

std::string ScriptedBackend::complete(const PromptBundle& bundle) {
  const int i = match(bundle.role, bundle.user);
  if (i < 0) {
    const std::string first_line = bundle.user.substr(0, bundle.user.find('\n'));
    throw BackendError(std::string("no scripted ") + to_string(bundle.role) + " response for: " + first_line);
  }
  return entries_[i].response;
}

// ---------------------------------------------------------------------------
// Chat backend

ChatConfig ChatConfig::from_env() {
  ChatConfig c;
  const char* key = std::getenv("LANG_API_KEY");
  if (!key || !*key) throw BackendError("LANG_API_KEY is not set; export it or use the scripted backend");
  c.api_key = key;
  if (const char* url = std::getenv("LANG_BASE_URL"); url && *url) c.base_url = url;
  if (const char* model = std::getenv("LANG_MODEL"); model && *model) c.model = model;
  return c;
}

namespace {
thread_local int g_last_attempts = 0;
}

int ChatBackend::last_attempts() { return g_last_attempts; }

ChatBackend::ChatBackend(ChatConfig cfg) : cfg_(std::move(cfg)) {}

std::string ChatBackend::complete(const PromptBundle& bundle) {
  static const std::regex url_re(R"(^(https?)://([^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(cfg_.base_url, m, url_re)) throw BackendError("malformed base URL '" + cfg_.base_url + "'");
  const std::string scheme = m[1], host = m[2];
  std::string path = m[3];
  while (!path.empty() && path.back() == '/') path.pop_back();
  path += "/chat/completions";
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (scheme == "https") throw BackendError("this build has no TLS support; use an http:// base URL");
#endif

  json body;
  body["model"] = cfg_.model;
  body["temperature"] = cfg_.temperature;
  body["messages"] = json::array();
  for (const auto& msg : bundle.messages()) body["messages"].push_back({{"role", msg.role}, {"content", msg.content}});
  const std::string payload = body.dump();

  httplib::Client cli(scheme + "://" + host);
  cli.set_connection_timeout(cfg_.timeout);
  cli.set_read_timeout(cfg_.timeout);
  cli.set_write_timeout(cfg_.timeout);
  httplib::Headers headers;
  if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);

  std::string last_error;
  int last_status = 0;
  auto delay = cfg_.backoff;
  g_last_attempts = 0;
  for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
    g_last_attempts = attempt;
    auto res = cli.Post(path, headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      last_status = 0;
    } else if (res->status == 200) {
      const json j = json::parse(res->body, nullptr, false);
      try {
        if (j.is_discarded()) throw std::runtime_error("body is not JSON");
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const std::exception& e) {
        throw BackendError(std::string("malformed chat completion: ") + e.what(), 200);
      }
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      last_status = res->status;
    } else {
      throw BackendError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200), res->status);
    }
    if (attempt < cfg_.max_attempts) {
      std::this_thread::sleep_for(delay);
      delay *= 2;
    }
  }
  throw BackendError("chat request failed after " + std::to_string(cfg_.max_attempts) + " attempts (" + last_error + ")",
                     last_status);
}

// ---------------------------------------------------------------------------
// Prompts

PromptLibrary PromptLibrary::load(const std::string& dir) {
  PromptLibrary lib;
  json manifest;
  try {
    manifest = json::parse(read_file(dir + "/manifest.json"));
    lib.version_ = manifest.at("version").get<int>();
    for (auto& [family, names] : manifest.at("families").items())
      for (const auto& n : names) {
        const std::string key = family + "/" + n.get<std::string>();
        lib.prompts_[key] = read_file(dir + "/" + key + ".txt");
      }
  } catch (const std::exception& e) {
    throw std::runtime_error("prompt library '" + dir + "': " + e.what());
  }
  return lib;
}

const std::string& PromptLibrary::system(const std::string& family, Role role, bool constrained) const {
  const std::string base = family + "/" + to_string(role) + "_";
  auto it = prompts_.find(base + (constrained ? "o" : "r"));
  if (it == prompts_.end()) it = prompts_.find(base + "o");
  if (it == prompts_.end()) throw std::runtime_error("no " + std::string(to_string(role)) + " prompt for family '" + family + "'");
  return it->second;
}

std::vector<std::string> PromptLibrary::families() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : prompts_) {
    const std::string f = k.substr(0, k.find('/'));
    if (out.empty() || out.back() != f) out.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Language module

LanguageModule::LanguageModule(std::shared_ptr<Backend> backend, std::shared_ptr<const PromptLibrary> prompts,
                               std::string family, bool constrained)
    : backend_(std::move(backend)), prompts_(std::move(prompts)), family_(std::move(family)), constrained_(constrained) {}

PromptBundle LanguageModule::tp_bundle(const std::string& instruction, const SceneDescription& scene,
                                       const std::string& feedback) const {
  PromptBundle b;
  b.role = Role::TP;
  b.system = prompts_->system(family_, Role::TP, constrained_);
  b.scene = scene.text();
  b.user = trim(instruction);
  if (!feedback.empty()) b.user += "\nFeedback: " + trim(feedback);
  b.user += "\n\n" + b.scene;
  return b;
}

PromptBundle LanguageModule::od_bundle(const std::string& subtask, const SceneDescription& scene,
                                       const std::vector<std::string>& plan, const std::vector<OdExchange>& history,
                                       const std::string& feedback) const {
  PromptBundle b;
  b.role = Role::OD;
  b.system = prompts_->system(family_, Role::OD, constrained_);
  if (!plan.empty()) {
    b.system += "\n\nThe current plan is:\n";
    for (size_t i = 0; i < plan.size(); ++i) b.system += std::to_string(i + 1) + ". " + plan[i] + "\n";
  }
  b.scene = scene.text();
  for (const auto& h : history) {
    b.history.push_back({"user", h.subtask});
    b.history.push_back({"assistant", h.response});
  }
  b.user = trim(subtask);
  if (!feedback.empty()) b.user += "\nFeedback: " + trim(feedback);
  b.user += "\n\n" + b.scene;
  return b;
}

TpResponse LanguageModule::plan(const std::string& instruction, const SceneDescription& scene,
                                const std::string& feedback) {
  if (trim(instruction).empty()) throw SchemaError("empty instruction");
  return parse_tp(backend_->complete(tp_bundle(instruction, scene, feedback)));
}

OdResponse LanguageModule::design(const std::string& subtask, const SceneDescription& scene,
                                  const std::vector<std::string>& plan, const std::vector<OdExchange>& history,
                                  const std::string& feedback, std::string* raw) {
  if (trim(subtask).empty()) throw SchemaError("empty subtask");
  std::string text = backend_->complete(od_bundle(subtask, scene, plan, history, feedback));
  OdResponse r = parse_od(text);
  if (raw) *raw = std::move(text);
  return r;
}

}  // namespace langmpc::lang
