#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "procut/domain.hpp"
#include "procut/io.hpp"
#include "procut/mock_oracle.hpp"

namespace procut::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("procut-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  std::filesystem::path write(const std::string& name, const std::string& content) const {
    const auto p = path_ / name;
    std::ofstream out(p, std::ios::binary);
    out << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path source_dir() { return PROCUT_SOURCE_DIR; }

/// Templates under resources/templates, keyed by file name.
inline std::map<std::string, std::string> template_corpus() {
  std::map<std::string, std::string> out;
  for (const auto& entry : std::filesystem::directory_iterator(source_dir() / "resources" / "templates")) {
    if (entry.path().extension() == ".txt") out[entry.path().filename().string()] = read_text_file(entry.path());
  }
  return out;
}

/// Value of an additive set function.
inline double additive(const std::vector<double>& w, const Mask& m) {
  double s = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j)
    if (m.test(j)) s += w[j];
  return s;
}

/// Shapley values by direct enumeration of every permutation; written
/// independently of the library's subset-weight formula.
template <typename F>
std::vector<double> shapley_by_permutations(std::size_t m, F&& v) {
  std::vector<std::size_t> order(m);
  for (std::size_t i = 0; i < m; ++i) order[i] = i;
  std::vector<double> phi(m, 0.0);
  double count = 0.0;
  do {
    Mask cur(m);
    double prev = v(cur);
    for (auto j : order) {
      cur.set(j);
      const double now = v(cur);
      phi[j] += now - prev;
      prev = now;
    }
    count += 1.0;
  } while (std::next_permutation(order.begin(), order.end()));
  for (auto& p : phi) p /= count;
  return phi;
}

/// A template of `m` one-sentence units, each carrying its own placeholder,
/// and a synthetic oracle answering v over exactly those units.
struct SyntheticWorld {
  std::vector<std::string> units;
  PromptTemplate tpl = parse_template("x");
  EvalTask task;
  std::shared_ptr<MockOracle> oracle;

  SyntheticWorld(std::size_t m, MaskValue value, std::size_t n_examples = 3,
                 std::size_t quantum = 1000, std::uint64_t seed = 0) {
    std::string raw;
    for (std::size_t i = 0; i < m; ++i) {
      units.push_back("Instruction " + std::to_string(i) + " about {q}. ");
      raw += units.back();
    }
    raw.pop_back();
    units.back().pop_back();
    tpl = parse_template(raw);
    task.metric = MetricId::token_f1;
    for (std::size_t i = 0; i < n_examples; ++i) {
      EvalExample ex{{{"q", "topic " + std::to_string(i)}}, synthetic_reference(quantum)};
      task.train.push_back(ex);
      task.test.push_back(ex);
    }
    oracle = std::make_shared<MockOracle>(seed);
    oracle->enable_meta();
    SyntheticConfig cfg;
    cfg.units = units;
    cfg.value = std::move(value);
    cfg.quantum = quantum;
    oracle->set_synthetic(std::move(cfg));
  }
};

}  // namespace procut::testing
