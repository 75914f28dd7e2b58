#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <utility>

namespace stageflow {

enum class ClockMode { Virtual, Wall };

/// Single-threaded event loop that doubles as the driving clock.
///
/// In Virtual mode time jumps to each event's due time, so a run is fully
/// deterministic: events fire in (due_ms, insertion order). In Wall mode the
/// loop sleeps until events come due and other threads may post work back
/// (see begin_external / finish_external), which is how blocking HTTP calls
/// are folded into the same execution model.
class EventLoop {
 public:
  explicit EventLoop(ClockMode mode = ClockMode::Virtual);

  ClockMode mode() const { return mode_; }

  /// Milliseconds on the driving clock (virtual ms, or wall ms since start).
  double now_ms() const;

  void schedule_at(double due_ms, std::function<void()> fn);
  void schedule_in(double delay_ms, std::function<void()> fn);
  void post(std::function<void()> fn) { schedule_in(0.0, std::move(fn)); }

  /// Runs events until none remain and no external work is outstanding.
  void run_until_idle();

  /// Runs until stop() is called, idling between events (Wall mode service
  /// loops). Pending events are abandoned on stop.
  void run();
  void stop();

  /// Marks one unit of work handed to another thread (Wall mode only).
  /// The loop stays alive until finish_external posts its continuation.
  void begin_external();
  void finish_external(std::function<void()> fn);

  std::uint64_t events_processed() const { return processed_; }

 private:
  using Key = std::pair<double, std::uint64_t>;  // (due_ms, seq)

  ClockMode mode_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<Key, std::function<void()>> events_;
  double virtual_now_ = 0.0;
  std::chrono::steady_clock::time_point wall_epoch_;
  std::uint64_t seq_ = 0;
  std::uint64_t processed_ = 0;
  int external_ops_ = 0;
  bool stopped_ = false;

  double now_locked() const;
  void run_impl(bool until_idle);
};

}  // namespace stageflow
