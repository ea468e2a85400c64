#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "procut/domain.hpp"

namespace procut {

/// Throws Errc::io_error when the file cannot be read.
std::string read_text_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

/// A dataset line: `{"inputs": {...}, "reference": "...", "split": "train"|"test"}`.
/// `split` is optional; unlabeled lines are assigned by SplitPolicy.
struct LabeledExample {
  EvalExample example;
  std::optional<Split> split;
};

/// Throws Errc::io_error naming the offending line.
std::vector<LabeledExample> parse_dataset_jsonl(std::istream& in);
std::vector<LabeledExample> load_dataset(const std::filesystem::path& path);

struct SplitPolicy {
  /// Unlabeled examples fill the train split first, up to this many.
  std::size_t n_train = 20;
};

/// Labeled examples go to their split; unlabeled ones fill train up to
/// n_train, the rest go to test. When nothing lands in test, test reuses
/// the train examples.
EvalTask make_task(const std::vector<LabeledExample>& examples, MetricId metric,
                   const SplitPolicy& policy = {});

}  // namespace procut
