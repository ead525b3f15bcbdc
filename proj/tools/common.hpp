#pragma once

#include <csignal>
#include <functional>
#include <iostream>
#include <mutex>
#include <pthread.h>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "fedbot/model_io.hpp"

namespace fedbot::tools {

inline constexpr int kExitInterrupted = 130;

// SIGINT/SIGTERM are blocked in every thread and consumed by one watcher
// that runs the registered shutdown action. Construct first thing in main.
class SignalWatcher {
 public:
  SignalWatcher() {
    sigemptyset(&set());
    sigaddset(&set(), SIGINT);
    sigaddset(&set(), SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set(), nullptr);
    std::thread([this] {
      int sig = 0;
      if (sigwait(&set(), &sig) != 0) return;
      std::lock_guard lock(mutex_);
      fired_ = true;
      std::cerr << "received " << (sig == SIGINT ? "SIGINT" : "SIGTERM") << ", shutting down\n";
      if (action_) action_();
    }).detach();
  }
  ~SignalWatcher() {
    std::lock_guard lock(mutex_);
    action_ = nullptr;
  }
  SignalWatcher(const SignalWatcher&) = delete;
  SignalWatcher& operator=(const SignalWatcher&) = delete;

  void on_signal(std::function<void()> action) {
    std::lock_guard lock(mutex_);
    action_ = std::move(action);
    if (fired_ && action_) action_();
  }
  // Clears the action when the objects it touches go out of scope.
  struct [[nodiscard]] Scope {
    SignalWatcher& w;
    ~Scope() { w.on_signal(nullptr); }
  };
  Scope scoped(std::function<void()> action) {
    on_signal(std::move(action));
    return {*this};
  }

  bool fired() {
    std::lock_guard lock(mutex_);
    return fired_;
  }

 private:
  static sigset_t& set() {
    static sigset_t s;
    return s;
  }
  std::mutex mutex_;
  std::function<void()> action_;
  bool fired_ = false;
};

inline std::vector<std::string> args_of(int argc, char** argv) { return {argv, argv + argc}; }

/// Parses, runs the chosen subcommand and maps failures onto exit codes.
inline int run_app(CLI::App& app, int argc, char** argv, const std::function<int()>& body) {
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }
  try {
    return body();
  } catch (const Interrupted& e) {
    std::cerr << e.what() << '\n';
    return kExitInterrupted;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

}  // namespace fedbot::tools
