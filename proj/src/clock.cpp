#include "stageflow/clock.hpp"

#include <algorithm>
#include <cassert>
#include <stdexcept>

namespace stageflow {

EventLoop::EventLoop(ClockMode mode)
    : mode_(mode), wall_epoch_(std::chrono::steady_clock::now()) {}

double EventLoop::now_locked() const {
  if (mode_ == ClockMode::Virtual) return virtual_now_;
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - wall_epoch_)
      .count();
}

double EventLoop::now_ms() const {
  std::lock_guard<std::mutex> lk(mu_);
  return now_locked();
}

void EventLoop::schedule_at(double due_ms, std::function<void()> fn) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    events_.emplace(Key{due_ms, seq_++}, std::move(fn));
  }
  cv_.notify_all();
}

void EventLoop::schedule_in(double delay_ms, std::function<void()> fn) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    events_.emplace(Key{now_locked() + delay_ms, seq_++}, std::move(fn));
  }
  cv_.notify_all();
}

void EventLoop::begin_external() {
  if (mode_ == ClockMode::Virtual) {
    throw std::logic_error(
        "external (threaded) work is not allowed under the virtual clock");
  }
  std::lock_guard<std::mutex> lk(mu_);
  ++external_ops_;
}

void EventLoop::finish_external(std::function<void()> fn) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    --external_ops_;
    events_.emplace(Key{now_locked(), seq_++}, std::move(fn));
  }
  cv_.notify_all();
}

void EventLoop::run_until_idle() { run_impl(/*until_idle=*/true); }

void EventLoop::run() { run_impl(/*until_idle=*/false); }

void EventLoop::stop() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stopped_ = true;
  }
  cv_.notify_all();
}

void EventLoop::run_impl(bool until_idle) {
  std::unique_lock<std::mutex> lk(mu_);
  for (;;) {
    if (stopped_) return;
    if (events_.empty()) {
      if (until_idle && external_ops_ == 0) return;
      cv_.wait(lk);
      continue;
    }
    auto it = events_.begin();
    if (mode_ == ClockMode::Wall) {
      const auto due_tp =
          wall_epoch_ + std::chrono::duration_cast<
                            std::chrono::steady_clock::duration>(
                            std::chrono::duration<double, std::milli>(
                                it->first.first));
      if (std::chrono::steady_clock::now() < due_tp) {
        // An earlier event or external completion may arrive while waiting.
        cv_.wait_until(lk, due_tp);
        continue;
      }
    } else {
      virtual_now_ = std::max(virtual_now_, it->first.first);
    }
    auto fn = std::move(it->second);
    events_.erase(it);
    ++processed_;
    lk.unlock();
    fn();
    lk.lock();
  }
}

}  // namespace stageflow
