#include "procut/io.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "procut/error.hpp"

namespace procut {

using nlohmann::json;

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io_error, "cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error(Errc::io_error, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io_error, "cannot rename onto " + path.string() + ": " + ec.message());
}

std::vector<LabeledExample> parse_dataset_jsonl(std::istream& in) {
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) {
      throw Error(Errc::io_error, "dataset line " + std::to_string(lineno) + ": " + why);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(e.what());
    }
    if (!j.is_object()) fail("expected a JSON object");
    LabeledExample ex;
    if (j.contains("inputs")) {
      if (!j["inputs"].is_object()) fail("'inputs' must be an object");
      for (auto& [k, v] : j["inputs"].items()) {
        if (!v.is_string()) fail("input '" + k + "' must be a string");
        ex.example.inputs[k] = v.get<std::string>();
      }
    }
    if (j.contains("reference")) {
      if (!j["reference"].is_string()) fail("'reference' must be a string");
      ex.example.reference = j["reference"].get<std::string>();
    }
    if (j.contains("split")) {
      const auto s = j["split"].is_string() ? j["split"].get<std::string>() : std::string{};
      if (s == "train") {
        ex.split = Split::train;
      } else if (s == "test") {
        ex.split = Split::test;
      } else {
        fail("'split' must be \"train\" or \"test\"");
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<LabeledExample> load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io_error, "cannot open " + path.string());
  return parse_dataset_jsonl(in);
}

EvalTask make_task(const std::vector<LabeledExample>& examples, MetricId metric,
                   const SplitPolicy& policy) {
  EvalTask task;
  task.metric = metric;
  std::size_t unlabeled_train = 0;
  for (const auto& ex : examples) {
    if (ex.split) {
      (*ex.split == Split::train ? task.train : task.test).push_back(ex.example);
    } else if (unlabeled_train < policy.n_train) {
      task.train.push_back(ex.example);
      ++unlabeled_train;
    } else {
      task.test.push_back(ex.example);
    }
  }
  if (task.test.empty()) task.test = task.train;
  return task;
}

}  // namespace procut
