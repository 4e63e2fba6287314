#include "esr/runner/config.hpp"

#include "esr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace esr::runner {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string type_name(const json& j) { return j.type_name(); }

/// Reads the fields of one JSON object, rejecting unknown keys and wrong types.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object, found " + type_name(j_));
  }

  bool has(const char* key) const { return j_.contains(key); }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* get(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const char* key, T& out) {
    const json* v = get(key);
    if (v) out = convert<T>(*v, field(key));
  }

  template <typename E, typename Parse>
  void read_enum(const char* key, E& out, Parse parse) {
    const json* v = get(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(field(key) + ": expected a string, found " + type_name(*v));
    try {
      out = parse(v->get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  Section child(const char* key) {
    static const json empty = json::object();
    const json* v = get(key);
    return Section(v ? *v : empty, field(key));
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(field(k.c_str()) + ": unknown key");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected a boolean, found " + type_name(v));
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string, found " + type_name(v));
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number, found " + type_name(v));
      return v.get<T>();
    } else if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError(name + ": must be >= 0");
      if (!v.is_number_unsigned()) throw ConfigError(name + ": expected an integer, found " + type_name(v));
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer, found " + type_name(v));
      return v.get<T>();
    } else {
      if (!v.is_array()) throw ConfigError(name + ": expected an array, found " + type_name(v));
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], name + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json parse_document(std::string_view text) {
  try {
    return json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n'));
    throw ConfigParseError(std::string("config: malformed document: ") + e.what(), line);
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void check_version(Section& s) {
  int version = kConfigVersion;
  s.read("version", version);
  if (version != kConfigVersion) {
    throw ConfigError(s.field("version") + ": unsupported version " + std::to_string(version));
  }
}

ExperimentConfig from_json(const json& doc) {
  ExperimentConfig c;
  Section top(doc, "");
  check_version(top);
  top.read("name", c.name);
  top.read("seed", c.seed);
  c.teacher.seed = c.seed;
  c.task.train_seed = c.seed;
  c.task.eval_seed = c.seed + 1000;

  {
    Section s = top.child("student");
    s.read("layers", c.student.layers);
    s.read("heads", c.student.heads);
    s.read("width", c.student.width);
    s.read("mlp_multiplier", c.student.mlp_multiplier);
    s.read("max_context", c.student.max_context);
    s.read("tokenizer", c.student.tokenizer);
    s.finish();
  }
  {
    Section s = top.child("teacher");
    s.read("kind", c.teacher.kind);
    s.read("tokenizer", c.teacher.tokenizer);
    s.read("epsilon", c.teacher.epsilon);
    s.read("trap_chars", c.teacher.trap_chars);
    s.read("table", c.teacher.table);
    s.read("seed", c.teacher.seed);
    s.read("concentration", c.teacher.concentration);
    s.read("smoothing", c.teacher.smoothing);
    s.read("include_eos", c.teacher.include_eos);
    s.finish();
  }
  {
    Section s = top.child("task");
    s.read_enum("kind", c.task.kind, tasks::parse_task_kind);
    s.read("operand_digits", c.task.difficulty.operand_digits);
    s.read("list_length", c.task.difficulty.list_length);
    s.read("train_problems", c.task.train_problems);
    s.read("eval_problems", c.task.eval_problems);
    s.read("train_seed", c.task.train_seed);
    s.read("eval_seed", c.task.eval_seed);
    s.finish();
  }
  {
    auto& d = c.distill;
    Section s = top.child("distill");
    s.read("cutoff", d.cutoff);
    s.read("max_length", d.max_length);
    s.read("temperature", d.temperature);
    s.read("allow_eos", d.allow_eos);
    s.read("batch_size", d.batch_size);
    s.read("rollouts_per_problem", d.rollouts_per_problem);
    s.read("steps", d.steps);
    s.read("checkpoint_interval", d.checkpoint_interval);
    s.read_enum("regime", d.regime, lm::parse_regime);
    s.read("adapter_rank", d.adapter_rank);
    s.read("adapter_alpha", d.adapter_alpha);
    s.read_enum("strategy", d.strategy, distill::parse_strategy);
    s.read_enum("reduction", d.reduction, distill::parse_reduction);
    s.read_enum("optimizer", d.optimizer.kind, distill::parse_optimizer);
    s.read("learning_rate", d.optimizer.lr);
    s.read("beta1", d.optimizer.beta1);
    s.read("beta2", d.optimizer.beta2);
    s.read("adam_eps", d.optimizer.eps);
    s.read("grad_clip", d.optimizer.clip);
    s.read("teacher_floor", d.teacher_floor);
    s.finish();
    d.seed = c.seed;
  }
  {
    Section s = top.child("eval");
    s.read("k", c.eval.k);
    s.read("temperature", c.eval.temperature);
    s.read("max_tokens", c.eval.max_tokens);
    s.read("seed", c.eval.seed);
    s.read("at_checkpoints", c.eval.at_checkpoints);
    s.finish();
  }
  {
    auto& p = c.probes;
    p.at = {0, c.distill.steps};
    Section s = top.child("probes");
    s.read("at", p.at);
    s.read("profile", p.profile);
    s.read("commitment", p.commitment);
    s.read("lengths", p.lengths);
    s.read("categories", p.categories);
    s.read("decay", p.decay);
    s.read("prompts", p.prompts);
    s.read("max_length", p.max_length);
    s.read("samples", p.samples);
    s.read("temperature", p.temperature);
    s.read("allow_eos", p.allow_eos);
    s.read("bucket_width", p.bucket_width);
    s.read("top_fraction", p.top_fraction);
    s.read("category_rules", p.category_rules);
    s.read("decay_t", p.decay_t);
    s.read("decay_problems", p.decay_problems);
    s.read("decay_k", p.decay_k);
    s.read("seed", p.seed);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ordered_json to_json(const ExperimentConfig& c) {
  ordered_json j;
  j["version"] = c.version;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["student"] = {{"layers", c.student.layers},
                  {"heads", c.student.heads},
                  {"width", c.student.width},
                  {"mlp_multiplier", c.student.mlp_multiplier},
                  {"max_context", c.student.max_context},
                  {"tokenizer", c.student.tokenizer}};
  j["teacher"] = {{"kind", c.teacher.kind},
                  {"tokenizer", c.teacher.tokenizer},
                  {"epsilon", c.teacher.epsilon},
                  {"trap_chars", c.teacher.trap_chars},
                  {"table", c.teacher.table},
                  {"seed", c.teacher.seed},
                  {"concentration", c.teacher.concentration},
                  {"smoothing", c.teacher.smoothing},
                  {"include_eos", c.teacher.include_eos}};
  j["task"] = {{"kind", std::string(tasks::to_string(c.task.kind))},
               {"operand_digits", c.task.difficulty.operand_digits},
               {"list_length", c.task.difficulty.list_length},
               {"train_problems", c.task.train_problems},
               {"eval_problems", c.task.eval_problems},
               {"train_seed", c.task.train_seed},
               {"eval_seed", c.task.eval_seed}};
  const auto& d = c.distill;
  j["distill"] = {{"cutoff", d.cutoff},
                  {"max_length", d.max_length},
                  {"temperature", d.temperature},
                  {"allow_eos", d.allow_eos},
                  {"batch_size", d.batch_size},
                  {"rollouts_per_problem", d.rollouts_per_problem},
                  {"steps", d.steps},
                  {"checkpoint_interval", d.checkpoint_interval},
                  {"regime", lm::to_string(d.regime)},
                  {"adapter_rank", d.adapter_rank},
                  {"adapter_alpha", d.adapter_alpha},
                  {"strategy", distill::to_string(d.strategy)},
                  {"reduction", distill::to_string(d.reduction)},
                  {"optimizer", distill::to_string(d.optimizer.kind)},
                  {"learning_rate", d.optimizer.lr},
                  {"beta1", d.optimizer.beta1},
                  {"beta2", d.optimizer.beta2},
                  {"adam_eps", d.optimizer.eps},
                  {"grad_clip", d.optimizer.clip},
                  {"teacher_floor", d.teacher_floor}};
  j["eval"] = {{"k", c.eval.k},
               {"temperature", c.eval.temperature},
               {"max_tokens", c.eval.max_tokens},
               {"seed", c.eval.seed},
               {"at_checkpoints", c.eval.at_checkpoints}};
  const auto& p = c.probes;
  j["probes"] = {{"at", p.at},
                 {"profile", p.profile},
                 {"commitment", p.commitment},
                 {"lengths", p.lengths},
                 {"categories", p.categories},
                 {"decay", p.decay},
                 {"prompts", p.prompts},
                 {"max_length", p.max_length},
                 {"samples", p.samples},
                 {"temperature", p.temperature},
                 {"allow_eos", p.allow_eos},
                 {"bucket_width", p.bucket_width},
                 {"top_fraction", p.top_fraction},
                 {"category_rules", p.category_rules},
                 {"decay_t", p.decay_t},
                 {"decay_problems", p.decay_problems},
                 {"decay_k", p.decay_k},
                 {"seed", p.seed}};
  return j;
}

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(version == kConfigVersion, "version", "unsupported version");
  require(!name.empty() && name.find('/') == std::string::npos && name != "." && name != "..", "name",
          "must be a plain directory name");

  require(student.layers >= 1, "student.layers", "must be >= 1");
  require(student.heads >= 1, "student.heads", "must be >= 1");
  require(student.width >= 1 && student.width % student.heads == 0, "student.width",
          "must be a positive multiple of heads");
  require(student.mlp_multiplier >= 1, "student.mlp_multiplier", "must be >= 1");
  require(!student.tokenizer.empty(), "student.tokenizer", "must not be empty");

  require(teacher.kind == "scripted" || teacher.kind == "markov", "teacher.kind",
          "must be \"scripted\" or \"markov\"");
  require(!teacher.tokenizer.empty(), "teacher.tokenizer", "must not be empty");
  require(teacher.epsilon >= 0 && teacher.epsilon <= 1, "teacher.epsilon", "must be in [0, 1]");
  require(teacher.concentration > 0, "teacher.concentration", "must be > 0");
  require(teacher.smoothing >= 0 && teacher.smoothing <= 1, "teacher.smoothing", "must be in [0, 1]");

  const auto& d = task.difficulty;
  require(d.operand_digits >= 1 && d.operand_digits <= 4, "task.operand_digits", "must be in [1, 4]");
  require(d.list_length >= 1 && d.list_length <= 12, "task.list_length", "must be in [1, 12]");
  require(task.train_problems >= 1, "task.train_problems", "must be >= 1");
  require(task.eval_problems >= 1, "task.eval_problems", "must be >= 1");

  try {
    distill.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("distill.") + e.what());
  }
  require(distill.steps >= 1, "distill.steps", "must be >= 1");
  require(distill.adapter_alpha > 0, "distill.adapter_alpha", "must be > 0");

  require(eval.k >= 1, "eval.k", "must be >= 1");
  require(eval.temperature >= 0, "eval.temperature", "must be >= 0");
  require(eval.max_tokens >= 1, "eval.max_tokens", "must be >= 1");

  for (auto s : probes.at) {
    require(s <= distill.steps, "probes.at", "steps must be <= distill.steps");
    require(s == 0 || s == distill.steps || s % distill.checkpoint_interval == 0, "probes.at",
            "steps must be 0, checkpoint steps or the final step");
  }
  require(probes.prompts >= 1, "probes.prompts", "must be >= 1");
  require(probes.max_length >= 1, "probes.max_length", "must be >= 1");
  require(probes.samples >= 1, "probes.samples", "must be >= 1");
  require(probes.temperature >= 0, "probes.temperature", "must be >= 0");
  require(probes.bucket_width >= 1, "probes.bucket_width", "must be >= 1");
  require(probes.top_fraction > 0 && probes.top_fraction <= 1, "probes.top_fraction", "must be in (0, 1]");
  require(!probes.decay_t.empty() && probes.decay_t.front() == 0, "probes.decay_t", "must start at 0");
  require(std::adjacent_find(probes.decay_t.begin(), probes.decay_t.end(), std::greater_equal<>()) ==
              probes.decay_t.end(),
          "probes.decay_t", "must be strictly ascending");
  require(probes.decay_problems >= 1, "probes.decay_problems", "must be >= 1");
  require(probes.decay_k >= 1, "probes.decay_k", "must be >= 1");

  // BOS, the longest prompt (under 32 tokens for every task kind) and the response.
  const std::size_t longest =
      std::max({distill.generation_limit(), eval.max_tokens, probes.max_length, probes.decay_t.back()});
  require(student.max_context >= 1 && static_cast<std::size_t>(student.max_context) >= longest + 33,
          "student.max_context", "must exceed the longest response by at least 33 tokens");
}

ExperimentConfig parse_config(std::string_view text) { return from_json(parse_document(text)); }

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_text(path)); }

std::string dump_config(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << dump_config(cfg);
  if (!out) throw IoError("cannot write " + path.string());
}

std::string apply_overrides(std::string_view text, const std::vector<std::string>& overrides) {
  ordered_json doc = text.empty() ? ordered_json::object() : ordered_json::parse(parse_document(text).dump());
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override \"" + o + "\": expected key=value");
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    ordered_json value;
    try {
      value = ordered_json::parse(raw);
    } catch (const ordered_json::parse_error&) {
      value = raw;
    }
    ordered_json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (part.empty()) throw ConfigError("override \"" + o + "\": empty key segment");
      if (!node->is_object()) throw ConfigError(key + ": not a section");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      if (node->is_null()) *node = ordered_json::object();
      start = dot + 1;
    }
  }
  return doc.dump(2);
}

// ---------------------------------------------------------------------------

SweepConfig parse_sweep_config(std::string_view text) {
  const json doc = parse_document(text);
  SweepConfig c;
  Section s(doc, "");
  check_version(s);
  s.read("name", c.name);
  if (const json* base = s.get("base")) {
    if (!base->is_object()) throw ConfigError("base: expected an object");
    c.base = base->dump();
  } else {
    c.base = "{}";
  }
  s.read("cutoffs", c.cutoffs);
  if (const json* v = s.get("strategies")) {
    for (const auto& name : Section::convert<std::vector<std::string>>(*v, "strategies")) {
      try {
        c.strategies.push_back(distill::parse_strategy(name));
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("strategies: ") + e.what());
      }
    }
  }
  s.read("full_opd", c.full_opd);
  s.read("seeds", c.seeds);
  s.finish();
  require(!c.name.empty() && c.name.find('/') == std::string::npos, "name", "must be a plain directory name");
  require(!c.seeds.empty(), "seeds", "must not be empty");
  require(!c.cutoffs.empty() || !c.strategies.empty() || c.full_opd, "cutoffs",
          "the sweep has no runs (set cutoffs, strategies or full_opd)");
  expand_sweep(c);
  return c;
}

SweepConfig load_sweep_config(const std::filesystem::path& path) { return parse_sweep_config(read_text(path)); }

std::string dump_sweep_config(const SweepConfig& c) {
  ordered_json j;
  j["version"] = c.version;
  j["name"] = c.name;
  j["base"] = ordered_json::parse(c.base);
  j["cutoffs"] = c.cutoffs;
  std::vector<std::string> names;
  for (auto s : c.strategies) names.emplace_back(distill::to_string(s));
  j["strategies"] = names;
  j["full_opd"] = c.full_opd;
  j["seeds"] = c.seeds;
  return j.dump(2) + "\n";
}

static std::string variant_dir_name(std::string_view variant) {
  std::string out(variant);
  std::replace(out.begin(), out.end(), '*', 'x');
  return out;
}

std::vector<SweepRun> expand_sweep(const SweepConfig& c) {
  struct Variant {
    std::string name;
    std::vector<std::string> overrides;
  };
  std::vector<Variant> variants;
  for (auto n : c.cutoffs) {
    variants.push_back({"n" + std::to_string(n), {"distill.strategy=\"position-esr\"",
                                                  "distill.cutoff=" + std::to_string(n)}});
  }
  for (auto s : c.strategies) {
    variants.push_back({variant_dir_name(distill::to_string(s)),
                        {"distill.strategy=\"" + std::string(distill::to_string(s)) + "\""}});
  }
  if (c.full_opd) variants.push_back({"full-opd", {"distill.strategy=\"full-opd\""}});

  std::vector<SweepRun> runs;
  for (const auto& v : variants) {
    for (auto seed : c.seeds) {
      auto overrides = v.overrides;
      overrides.push_back("seed=" + std::to_string(seed));
      overrides.push_back("name=\"" + v.name + "-seed" + std::to_string(seed) + "\"");
      try {
        runs.push_back({v.name, seed, parse_config(apply_overrides(c.base, overrides))});
      } catch (const ConfigError& e) {
        throw ConfigError(std::string("base.") + e.what());
      }
    }
  }
  return runs;
}

}  // namespace esr::runner
