#include "procut/value_function.hpp"

#include "procut/error.hpp"

namespace procut {

std::vector<double> SetFunction::evaluate(std::span<const Mask> masks) {
  std::vector<double> out;
  out.reserve(masks.size());
  for (const auto& m : masks) {
    if (m.size() != size_) {
      throw Error(Errc::dimension_mismatch, "mask length " + std::to_string(m.size()) +
                                                " != " + std::to_string(size_));
    }
    out.push_back(fn_(m));
  }
  return out;
}

std::vector<double> ProbeRecorder::evaluate(std::span<const Mask> masks) {
  std::vector<Mask> fresh;
  std::unordered_map<Mask, std::size_t, MaskHash> pending;
  for (const auto& m : masks) {
    if (!memo_.contains(m) && !pending.contains(m)) {
      pending.emplace(m, fresh.size());
      fresh.push_back(m);
    }
  }
  if (!fresh.empty()) {
    const auto values = inner_.evaluate(fresh);
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      memo_.emplace(fresh[i], values[i]);
      log_.emplace_back(fresh[i], values[i]);
    }
  }
  std::vector<double> out;
  out.reserve(masks.size());
  for (const auto& m : masks) out.push_back(memo_.at(m));
  return out;
}

}  // namespace procut
