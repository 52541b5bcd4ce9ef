#pragma once

// HTTP session service for the operator console. Each session owns one engine
// loop thread; HTTP handlers talk to it through an ordered command queue and
// read copy-on-read snapshots.

#include <memory>
#include <string>

namespace langmpc::gateway {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string asset_dir = "assets";
  std::string ui_dir;  // static console bundle; a placeholder page is served when empty
  /// Real-time multiplier for sessions that do not set one; 0 runs unthrottled.
  double default_speed = 1.0;
  /// Stream messages kept per session for `?from=` resumption.
  std::size_t history_limit = 200000;
};

class Gateway {
 public:
  explicit Gateway(ServerOptions opt);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds host:port and serves until stop(); false when binding fails.
  bool listen();

  /// Binds an ephemeral port on host and returns it (tests).
  int bind_any_port();
  /// Serves on the socket from bind_any_port(); blocks until stop().
  bool listen_after_bind();
  void wait_until_ready();
  void stop();

  std::size_t session_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace langmpc::gateway
