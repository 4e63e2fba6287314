#include "esr/errors.hpp"
#include "esr/runner/runner.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace esr::runner {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::optional<json> read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  try {
    return json::parse(in);
  } catch (const json::parse_error&) {
    throw ReportError("malformed artifact " + path.string());
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::ifstream in(path, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

std::string cell(const json& v) {
  if (v.is_null()) return "n/a";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  return v.dump();
}

/// Tab-separated table with a header line.
class Table {
 public:
  explicit Table(std::vector<std::string> header) : header_(std::move(header)) {}
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }
  bool empty() const { return rows_.empty(); }
  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "\t" : "") + r[i];
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

class Writer {
 public:
  explicit Writer(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }
  void write(const std::string& name, const std::string& text) {
    std::ofstream out(dir_ / name, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write " + (dir_ / name).string());
    files_.push_back(dir_ / name);
  }
  /// Removes a stale copy so that absent figures stay absent.
  void drop(const std::string& name) { fs::remove(dir_ / name); }
  std::vector<fs::path> files() const { return files_; }

 private:
  fs::path dir_;
  std::vector<fs::path> files_;
};

std::vector<json> probe_records(const fs::path& dir) {
  std::vector<fs::path> paths;
  if (fs::exists(dir / "probes")) {
    for (const auto& e : fs::directory_iterator(dir / "probes")) {
      if (e.path().extension() == ".json") paths.push_back(e.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<json> out;
  for (const auto& p : paths) out.push_back(*read_json(p));
  return out;
}

const std::vector<std::string> kEvalColumns = {"avg_at_k", "pass_at_k", "maj_at_k", "k",
                                               "temperature", "problems", "mean_length"};

std::vector<fs::path> run_report(const fs::path& dir) {
  const auto result = read_json(dir / "result.json");
  if (!result) {
    std::string absent;
    for (const char* a : {"config.json", "metrics.jsonl", "evals/trained.json", "result.json"}) {
      if (!fs::exists(dir / a)) absent += std::string(absent.empty() ? "" : ", ") + a;
    }
    throw ReportError("no completed run in " + dir.string() + "; absent: " + absent);
  }
  Writer w(dir / "report");
  std::vector<std::string> missing;

  Table evals({"source", "step"});
  {
    std::vector<std::string> header = {"source", "step"};
    header.insert(header.end(), kEvalColumns.begin(), kEvalColumns.end());
    evals = Table(header);
    auto row = [&](const std::string& source, const std::string& step, const json& r) {
      std::vector<std::string> cells = {source, step};
      for (const auto& c : kEvalColumns) cells.push_back(cell(r.at(c)));
      evals.add(cells);
    };
    row("baseline", "0", result->at("baseline"));
    row("teacher", "n/a", result->at("teacher"));
    for (const auto& r : read_jsonl(dir / "evals.jsonl")) row("student", cell(r.at("step")), r);
    w.write("evals.tsv", evals.str());
  }

  const auto metrics = read_jsonl(dir / "metrics.jsonl");
  if (!metrics.empty()) {
    std::vector<std::string> header;
    for (const auto& [k, _] : metrics.front().items()) header.push_back(k);
    std::stable_partition(header.begin(), header.end(), [](const std::string& k) { return k == "step"; });
    Table t(header);
    for (const auto& m : metrics) {
      std::vector<std::string> cells;
      for (const auto& k : header) cells.push_back(cell(m.at(k)));
      t.add(cells);
    }
    w.write("training.tsv", t.str());
  }

  Table decay({"step", "t", "accuracy", "delta"});
  Table profile({"step", "begin", "end", "count", "mean_kl", "mean_student_entropy", "mean_teacher_entropy"});
  Table cascade({"step", "cutoff", "in_before", "in_after", "in_window_drop_pct", "out_before", "out_after",
                 "out_window_drop_pct"});
  Table commitment({"step", "top_fraction", "top1_pct", "top2to5_pct", "outside_top5_pct", "mean_top1_prob", "n"});
  Table lengths({"step", "p10", "p50", "p90", "mean", "ratio_to_untrained"});
  Table categories({"step", "category", "count", "mean_kl"});
  std::string decay_corr;
  for (const auto& p : probe_records(dir)) {
    const std::string step = cell(p.at("step"));
    if (p.contains("decay")) {
      const auto& d = p["decay"];
      for (std::size_t i = 0; i < d["t"].size(); ++i) {
        decay.add({step, cell(d["t"][i]), cell(d["accuracy"][i]), cell(d["delta"][i])});
      }
      decay_corr += "  step " + step + ": spearman(t, delta) = " + cell(d["spearman_t_delta"]) + "\n";
    }
    if (p.contains("profile")) {
      for (const auto& b : p["profile"]["buckets"]) {
        profile.add({step, cell(b["begin"]), cell(b["end"]), cell(b["count"]), cell(b["mean_kl"]),
                     cell(b["mean_student_entropy"]), cell(b["mean_teacher_entropy"])});
      }
    }
    if (p.contains("cascade")) {
      const auto& c = p["cascade"];
      cascade.add({step, cell(c["cutoff"]), cell(c["in_before"]), cell(c["in_after"]), cell(c["in_window_drop_pct"]),
                   cell(c["out_before"]), cell(c["out_after"]), cell(c["out_window_drop_pct"])});
    }
    if (p.contains("commitment") && !p["commitment"].contains("unavailable")) {
      const auto& c = p["commitment"];
      commitment.add({step, cell(c["top_fraction"]), cell(c["top1_pct"]), cell(c["top2to5_pct"]),
                      cell(c["outside_top5_pct"]), cell(c["mean_top1_prob"]), cell(c["n"])});
    }
    if (p.contains("lengths")) {
      const auto& l = p["lengths"];
      lengths.add({step, cell(l["p10"]), cell(l["p50"]), cell(l["p90"]), cell(l["mean"]),
                   cell(l["ratio_to_untrained"])});
    }
    if (p.contains("categories")) {
      for (const auto& c : p["categories"]) categories.add({step, cell(c["category"]), cell(c["count"]), cell(c["mean_kl"])});
    }
  }
  const std::vector<std::pair<std::string, const Table*>> figures = {
      {"decay.tsv", &decay},           {"position_profile.tsv", &profile}, {"cascade.tsv", &cascade},
      {"commitment.tsv", &commitment}, {"lengths.tsv", &lengths},          {"categories.tsv", &categories}};
  for (const auto& [name, table] : figures) {
    if (table->empty()) {
      w.drop(name);
      missing.push_back(name);
    } else {
      w.write(name, table->str());
    }
  }

  std::ostringstream s;
  const auto& r = *result;
  s << "run: " << cell(r["name"]) << "\n";
  s << "strategy: " << cell(r["strategy"]) << ", cutoff " << cell(r["cutoff"]) << ", max length "
    << cell(r["max_length"]) << ", seed " << cell(r["seed"]) << ", steps " << cell(r["steps"]) << "\n";
  s << "baseline avg@k: " << cell(r["baseline"]["avg_at_k"]) << "\n";
  s << "teacher avg@k: " << cell(r["teacher"]["avg_at_k"]) << "\n";
  s << "trained avg@k: " << cell(r["trained"]["avg_at_k"]) << " (pass@k " << cell(r["trained"]["pass_at_k"])
    << ")\n";
  s << "best avg@k: " << cell(r["best_avg_at_k"]) << " at step " << cell(r["best_step"]) << "\n";
  s << "generated tokens per step: " << cell(r["mean_generated_tokens_per_step"]) << "\n";
  s << "supervised tokens per step: " << cell(r["mean_supervised_tokens_per_step"]) << "\n";
  if (!decay_corr.empty()) s << "teacher decay:\n" << decay_corr;
  s << "absent: " << (missing.empty() ? "none" : "") << "\n";
  for (const auto& m : missing) s << "  " << m << " (probe not run)\n";
  w.write("summary.txt", s.str());
  return w.files();
}

std::vector<fs::path> sweep_report(const fs::path& dir) {
  struct Run {
    std::string variant;
    fs::path dir;
    std::optional<json> result;
  };
  std::vector<Run> runs;
  for (const auto& v : fs::directory_iterator(dir)) {
    if (!v.is_directory() || v.path().filename() == "report") continue;
    for (const auto& s : fs::directory_iterator(v.path())) {
      if (s.is_directory() && s.path().filename().string().rfind("seed-", 0) == 0) {
        runs.push_back({v.path().filename().string(), s.path(), read_json(s.path() / "result.json")});
      }
    }
  }
  std::sort(runs.begin(), runs.end(), [](const Run& a, const Run& b) { return a.dir < b.dir; });
  std::vector<std::string> absent;
  for (const auto& r : runs) {
    if (!r.result) absent.push_back(fs::relative(r.dir, dir).string() + "/result.json");
  }
  if (std::none_of(runs.begin(), runs.end(), [](const Run& r) { return r.result.has_value(); })) {
    std::string msg = "no completed run in sweep " + dir.string() + "; absent:";
    if (absent.empty()) msg += " any run directory";
    for (const auto& a : absent) msg += " " + a;
    throw ReportError(msg);
  }

  Writer w(dir / "report");
  Table per_run({"variant", "strategy", "cutoff", "max_length", "seed", "best_avg_at_k", "best_step",
                 "final_avg_at_k", "final_pass_at_k", "baseline_avg_at_k", "teacher_avg_at_k",
                 "mean_generated_tokens_per_step", "mean_supervised_tokens_per_step", "mean_generate_s_per_step"});
  struct Agg {
    std::string strategy, cutoff;
    std::vector<double> best, baseline;
  };
  std::vector<std::string> order;
  std::map<std::string, Agg> agg;
  for (const auto& run : runs) {
    if (!run.result) continue;
    const auto& r = *run.result;
    per_run.add({run.variant, cell(r["strategy"]), cell(r["cutoff"]), cell(r["max_length"]), cell(r["seed"]),
                 cell(r["best_avg_at_k"]), cell(r["best_step"]), cell(r["trained"]["avg_at_k"]),
                 cell(r["trained"]["pass_at_k"]), cell(r["baseline"]["avg_at_k"]), cell(r["teacher"]["avg_at_k"]),
                 cell(r["mean_generated_tokens_per_step"]), cell(r["mean_supervised_tokens_per_step"]),
                 cell(r["mean_generate_s_per_step"])});
    if (!agg.count(run.variant)) order.push_back(run.variant);
    auto& a = agg[run.variant];
    a.strategy = cell(r["strategy"]);
    a.cutoff = a.strategy == "position-esr" ? cell(r["cutoff"]) : "n/a";
    a.best.push_back(r["best_avg_at_k"].get<double>());
    a.baseline.push_back(r["baseline"]["avg_at_k"].get<double>());
  }
  w.write("runs.tsv", per_run.str());

  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  Table comparison({"variant", "selection_method", "cutoff", "runs", "mean_best_avg_at_k", "min_best_avg_at_k",
                    "max_best_avg_at_k", "mean_baseline_avg_at_k"});
  for (const auto& v : order) {
    const auto& a = agg[v];
    comparison.add({v, a.strategy, a.cutoff, std::to_string(a.best.size()), json(mean(a.best)).dump(),
                    json(*std::min_element(a.best.begin(), a.best.end())).dump(),
                    json(*std::max_element(a.best.begin(), a.best.end())).dump(), json(mean(a.baseline)).dump()});
  }
  w.write("comparison.tsv", comparison.str());

  std::ostringstream s;
  s << "sweep: " << dir.filename().string() << "\n";
  s << "completed runs: " << runs.size() - absent.size() << " of " << runs.size() << "\n";
  s << "best avg@k by variant (mean over seeds):\n";
  for (const auto& v : order) s << "  " << v << ": " << json(mean(agg[v].best)).dump() << "\n";
  s << "absent: " << (absent.empty() ? "none" : "") << "\n";
  for (const auto& a : absent) s << "  " << a << "\n";
  w.write("summary.txt", s.str());
  return w.files();
}

}  // namespace

std::vector<fs::path> emit_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ReportError("no such artifact directory " + dir.string());
  if (fs::exists(dir / "sweep.json")) return sweep_report(dir);
  return run_report(dir);
}

}  // namespace esr::runner
