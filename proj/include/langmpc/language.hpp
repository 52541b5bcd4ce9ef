#pragma once

// Task Planner / Optimization Designer front end: prompt assembly, response
// schema parsing and the interchangeable text backends.

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace langmpc::lang {

enum class Role { TP, OD };
const char* to_string(Role r);

class BackendError : public std::runtime_error {
 public:
  explicit BackendError(const std::string& what, int status = 0) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Message {
  std::string role;  // system | user | assistant
  std::string content;
  friend bool operator==(const Message&, const Message&) = default;
};

/// Names the designer may refer to. Only names, never live values, so the
/// prompt bytes depend on the scene layout alone.
struct SceneDescription {
  std::vector<std::string> robots;  // empty name for single-arm scenes
  std::vector<std::string> objects;
  std::vector<std::string> params;

  std::string text() const;
};

struct PromptBundle {
  Role role = Role::TP;
  std::string system;
  std::string scene;
  std::vector<Message> history;
  std::string user;  // instruction (or subtask) + feedback + scene description

  std::vector<Message> messages() const;
  /// Canonical serialisation; equal bundles give equal bytes.
  std::string bytes() const;
};

struct TpResponse {
  std::vector<std::string> tasks;
};

struct OdResponse {
  std::string objective;
  std::vector<std::string> equality_constraints;
  std::vector<std::string> inequality_constraints;
};

/// Accepts strict JSON ({"tasks": [...]}) as well as Plan(tasks=[...]) and
/// Plan(tasks:[...]); code fences around either are ignored.
TpResponse parse_tp(std::string_view text);

/// Accepts strict JSON and Optimization(objective=..., equality_constraints=[...],
/// inequality_constraints=[...]); list items may be unquoted expressions.
OdResponse parse_od(std::string_view text);

std::string to_json_text(const TpResponse& r);
std::string to_json_text(const OdResponse& r);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string complete(const PromptBundle& bundle) = 0;
  virtual std::string name() const = 0;
};

/// Deterministic replay: the first entry whose role matches and whose pattern
/// occurs in the user message wins. Patterns written as /.../ (optionally
/// /.../i) are ECMAScript regexes, anything else is a plain substring.
class ScriptedBackend : public Backend {
 public:
  struct Entry {
    Role role;
    std::string pattern;
    std::string response;
    std::optional<std::regex> regex;
  };

  static ScriptedBackend load(const std::string& path);
  static ScriptedBackend from_json_text(std::string_view text);

  std::string complete(const PromptBundle& bundle) override;
  std::string name() const override { return "scripted"; }

  const std::vector<Entry>& entries() const { return entries_; }
  /// Index of the matching entry or -1.
  int match(Role role, std::string_view user) const;

 private:
  std::vector<Entry> entries_;
};

struct ChatConfig {
  std::string base_url = "https://api.openai.com/v1";
  std::string model = "gpt-4";
  std::string api_key;
  double temperature = 0.0;
  std::chrono::milliseconds timeout{60000};
  int max_attempts = 3;
  std::chrono::milliseconds backoff{500};  // doubled after every failed attempt

  /// Reads LANG_API_KEY, LANG_BASE_URL and LANG_MODEL. Throws BackendError
  /// when no API key is set.
  static ChatConfig from_env();
};

/// Chat-completions client. Stateless apart from its configuration, so one
/// instance can serve several sessions concurrently.
class ChatBackend : public Backend {
 public:
  explicit ChatBackend(ChatConfig cfg);
  std::string complete(const PromptBundle& bundle) override;
  std::string name() const override { return "chat"; }

  /// Attempts used by the most recent call on this thread.
  static int last_attempts();

 private:
  ChatConfig cfg_;
};

/// Versioned system prompts per task family.
class PromptLibrary {
 public:
  static PromptLibrary load(const std::string& dir);

  /// `constrained` selects the prompt that teaches inequality/equality
  /// constraints; families without a cost-only variant fall back to it.
  const std::string& system(const std::string& family, Role role, bool constrained) const;
  int version() const { return version_; }
  std::vector<std::string> families() const;

 private:
  int version_ = 0;
  std::map<std::string, std::string> prompts_;  // "<family>/<TP|OD>_<o|r>"
};

struct OdExchange {
  std::string subtask;
  std::string response;
};

class LanguageModule {
 public:
  LanguageModule(std::shared_ptr<Backend> backend, std::shared_ptr<const PromptLibrary> prompts, std::string family,
                 bool constrained = true);

  PromptBundle tp_bundle(const std::string& instruction, const SceneDescription& scene,
                         const std::string& feedback = "") const;
  PromptBundle od_bundle(const std::string& subtask, const SceneDescription& scene,
                         const std::vector<std::string>& plan, const std::vector<OdExchange>& history,
                         const std::string& feedback = "") const;

  /// Empty instructions are rejected before the backend is called.
  TpResponse plan(const std::string& instruction, const SceneDescription& scene, const std::string& feedback = "");
  OdResponse design(const std::string& subtask, const SceneDescription& scene, const std::vector<std::string>& plan,
                    const std::vector<OdExchange>& history, const std::string& feedback = "",
                    std::string* raw = nullptr);

  Backend& backend() { return *backend_; }
  const std::string& family() const { return family_; }

 private:
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<const PromptLibrary> prompts_;
  std::string family_;
  bool constrained_;
};

}  // namespace langmpc::lang
