#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "procut/domain.hpp"

namespace procut {

/// v(mask): the quantity every attribution estimator probes. Implementations
/// evaluate a whole batch at once so gateway-backed ones can run in parallel.
class ValueFunction {
 public:
  virtual ~ValueFunction() = default;
  /// Number of segments M; every mask passed in must have this length.
  virtual std::size_t size() const = 0;
  virtual std::vector<double> evaluate(std::span<const Mask> masks) = 0;

  double operator()(const Mask& mask) { return evaluate(std::span<const Mask>(&mask, 1)).front(); }
};

/// Wraps a plain set function.
class SetFunction final : public ValueFunction {
 public:
  SetFunction(std::size_t size, std::function<double(const Mask&)> fn)
      : size_(size), fn_(std::move(fn)) {}

  std::size_t size() const override { return size_; }
  std::vector<double> evaluate(std::span<const Mask> masks) override;

 private:
  std::size_t size_;
  std::function<double(const Mask&)> fn_;
};

/// Memoizes an inner value function and records each distinct mask in the
/// order it was first probed. Estimators report their budget from it.
class ProbeRecorder final : public ValueFunction {
 public:
  explicit ProbeRecorder(ValueFunction& inner) : inner_(inner) {}

  std::size_t size() const override { return inner_.size(); }
  std::vector<double> evaluate(std::span<const Mask> masks) override;

  std::size_t distinct_evaluations() const noexcept { return log_.size(); }
  const std::vector<std::pair<Mask, double>>& log() const noexcept { return log_; }

 private:
  ValueFunction& inner_;
  std::unordered_map<Mask, double, MaskHash> memo_;
  std::vector<std::pair<Mask, double>> log_;
};

}  // namespace procut
