#include "ehrnav/trace.hpp"

#include <algorithm>
#include <chrono>
#include <thread>

namespace ehrnav {

SteadyClock::SteadyClock() : origin_(std::chrono::steady_clock::now()) {}

double SteadyClock::now_ms() const {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - origin_).count();
}

void SteadyClock::sleep_for(double ms) {
  if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

double VirtualClock::now_ms() const {
  std::lock_guard lock(mu_);
  return now_;
}

void VirtualClock::sleep_for(double ms) {
  std::lock_guard lock(mu_);
  if (ms > 0) now_ += ms;
}

TraceRecorder::TraceRecorder(std::string trace_id, std::string question_id, const Clock& clock)
    : trace_id_(std::move(trace_id)),
      question_id_(std::move(question_id)),
      clock_(clock),
      started_ms_(clock.now_ms()) {}

void TraceRecorder::add(TraceStep step) {
  std::lock_guard lock(mu_);
  steps_.push_back(std::move(step));
}

std::vector<TraceStep> TraceRecorder::steps() const {
  std::lock_guard lock(mu_);
  return steps_;
}

TraceRecord TraceRecorder::finish() const {
  TraceRecord r;
  r.trace_id = trace_id_;
  r.question_id = question_id_;
  r.steps = steps();
  double step_sum = 0.0;
  for (const auto& s : r.steps) {
    step_sum += s.wall_ms;
    r.total_cost += s.cost;
  }
  // Steps are sub-intervals of the run; the max only absorbs rounding.
  r.total_latency_ms = std::max(clock_.now_ms() - started_ms_, step_sum);
  return r;
}

}  // namespace ehrnav
