#pragma once

#include <chrono>
#include <mutex>
#include <string>
#include <vector>

#include "ehrnav/model.hpp"

namespace ehrnav {

/// Millisecond time source for step accounting. Pipelines never call
/// std::chrono directly so scripted runs can use virtual time.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual double now_ms() const = 0;
  virtual void sleep_for(double ms) = 0;
};

class SteadyClock final : public Clock {
 public:
  SteadyClock();
  double now_ms() const override;
  void sleep_for(double ms) override;

 private:
  std::chrono::steady_clock::time_point origin_;
};

/// Time advances only through sleep_for. Used with the scripted backend so
/// reported latencies are exactly the scripted ones.
class VirtualClock final : public Clock {
 public:
  double now_ms() const override;
  void sleep_for(double ms) override;

 private:
  mutable std::mutex mu_;
  double now_ = 0.0;
};

class TraceRecorder {
 public:
  TraceRecorder(std::string trace_id, std::string question_id, const Clock& clock);

  void add(TraceStep step);
  std::vector<TraceStep> steps() const;
  const std::string& trace_id() const { return trace_id_; }

  /// Snapshot with totals; total latency is wall time since construction and
  /// never less than the sum of step times.
  TraceRecord finish() const;

 private:
  std::string trace_id_;
  std::string question_id_;
  const Clock& clock_;
  double started_ms_;
  mutable std::mutex mu_;
  std::vector<TraceStep> steps_;
};

struct RunContext {
  Clock& clock;
  TraceRecorder& trace;
};

class StepTimer {
 public:
  explicit StepTimer(const Clock& clock) : clock_(clock), start_(clock.now_ms()) {}
  double elapsed_ms() const { return clock_.now_ms() - start_; }

 private:
  const Clock& clock_;
  double start_;
};

}  // namespace ehrnav
