#include "esr/probes/probes.hpp"

#include "esr/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace esr::probes {

DecayCurve teacher_decay_curve(const lm::LanguageModel& teacher, const lm::LanguageModel& prefix_source,
                               const std::vector<tasks::Task>& tasks, const DecayOptions& options) {
  const auto& grid = options.t_grid;
  if (grid.empty() || grid.front() != 0) throw ConfigError("decay: t grid must start at 0");
  if (!std::is_sorted(grid.begin(), grid.end()) || std::adjacent_find(grid.begin(), grid.end()) != grid.end()) {
    throw ConfigError("decay: t grid must be strictly ascending");
  }
  if (options.k < 1) throw ConfigError("decay: k must be >= 1");
  const std::size_t t_max = grid.back();
  const auto& stok = prefix_source.tokenizer();
  const auto& ttok = teacher.tokenizer();

  std::vector<std::size_t> correct(grid.size(), 0);
  std::size_t samples = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto student_prompt = stok.encode(tasks[i].prompt);
    const auto teacher_prompt = ttok.encode(tasks[i].prompt);
    for (int j = 0; j < options.k; ++j) {
      const auto sj = static_cast<std::uint64_t>(j);
      std::vector<TokenId> prefix;
      if (t_max > 0) {
        lm::GenerationOptions g;
        g.max_tokens = t_max;
        g.temperature = options.prefix_temperature;
        g.allow_eos = false;
        g.record_scores = false;
        Rng rng(derive_seed(options.seed, {i, sj, 0}));
        prefix = lm::generate(prefix_source, student_prompt, g, rng).tokens;
      }
      for (std::size_t p = 0; p < grid.size(); ++p) {
        const std::size_t t = std::min(grid[p], prefix.size());
        const auto forced = ttok.encode(stok.decode(std::span(prefix).first(t)));
        lm::GenerationOptions g;
        g.max_tokens = forced.size() + options.continuation_tokens;
        g.temperature = options.teacher_temperature;
        g.record_scores = false;
        Rng rng(derive_seed(options.seed, {i, sj, 1}));
        const auto out = lm::generate(teacher, teacher_prompt, g, rng, forced);
        correct[p] += tasks::verify_response(tasks[i], ttok.decode(out.tokens));
      }
      ++samples;
    }
  }
  DecayCurve c;
  c.t = grid;
  c.samples_per_point = samples;
  for (std::size_t p = 0; p < grid.size(); ++p) {
    c.accuracy.push_back(samples ? static_cast<double>(correct[p]) / static_cast<double>(samples) : 0.0);
  }
  for (double a : c.accuracy) c.delta.push_back(c.accuracy.front() - a);
  return c;
}

std::vector<ScoredRollout> sample_scored(const lm::LanguageModel& student, const lm::LanguageModel& teacher,
                                         const std::vector<std::string>& prompts, const SampleOptions& options) {
  if (options.max_length < 1) throw ConfigError("max_length must be >= 1");
  if (options.samples < 1) throw ConfigError("samples must be >= 1");
  const auto bridge = distill::VocabBridge::build(student.tokenizer(), teacher.tokenizer());
  distill::RolloutOptions ro;
  ro.max_tokens = options.max_length;
  ro.temperature = options.temperature;
  ro.allow_eos = options.allow_eos;
  std::vector<ScoredRollout> out;
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto prompt = student.tokenizer().encode(prompts[p]);
    for (int s = 0; s < options.samples; ++s) {
      Rng rng(derive_seed(options.seed, {p, static_cast<std::uint64_t>(s)}));
      out.push_back(distill::score_rollout(distill::generate_rollout(student, prompt, ro, rng), student.tokenizer(),
                                           teacher, bridge));
    }
  }
  return out;
}

PositionProfile profile_from(const std::vector<ScoredRollout>& rollouts, std::size_t max_length,
                             std::size_t bucket_width) {
  if (max_length < 1) throw ConfigError("profile: max_length must be >= 1");
  if (bucket_width < 1) throw ConfigError("profile: bucket width must be >= 1");
  PositionProfile prof;
  for (std::size_t b = 0; b < max_length; b += bucket_width) {
    prof.buckets.push_back({b, std::min(b + bucket_width, max_length)});
  }
  for (const auto& r : rollouts) {
    for (const auto& s : r.stats) {
      if (!s.aligned || s.position >= max_length) continue;
      PositionBucket& b = prof.buckets[s.position / bucket_width];
      ++b.count;
      b.mean_kl += s.kl;
      b.mean_student_entropy += s.student_entropy;
      b.mean_teacher_entropy += s.teacher_entropy;
    }
  }
  for (auto& b : prof.buckets) {
    if (b.count == 0) continue;
    const double n = static_cast<double>(b.count);
    b.mean_kl /= n;
    b.mean_student_entropy /= n;
    b.mean_teacher_entropy /= n;
  }
  return prof;
}

PositionProfile position_profile(const lm::LanguageModel& student, const lm::LanguageModel& teacher,
                                 const std::vector<std::string>& prompts, const SampleOptions& options,
                                 std::size_t bucket_width) {
  return profile_from(sample_scored(student, teacher, prompts, options), options.max_length, bucket_width);
}

CascadeReport cascade_report(const PositionProfile& before, const PositionProfile& after, std::size_t cutoff) {
  if (before.buckets.size() != after.buckets.size()) throw ConfigError("cascade: profiles have different buckets");
  CascadeReport r;
  r.cutoff = cutoff;
  double in_b = 0, in_bn = 0, in_a = 0, in_an = 0, out_b = 0, out_bn = 0, out_a = 0, out_an = 0;
  for (std::size_t i = 0; i < before.buckets.size(); ++i) {
    const auto& b = before.buckets[i];
    const auto& a = after.buckets[i];
    if (b.begin != a.begin || b.end != a.end) throw ConfigError("cascade: profiles have different buckets");
    const bool in = b.begin < cutoff;
    (in ? in_b : out_b) += b.mean_kl * static_cast<double>(b.count);
    (in ? in_bn : out_bn) += static_cast<double>(b.count);
    (in ? in_a : out_a) += a.mean_kl * static_cast<double>(a.count);
    (in ? in_an : out_an) += static_cast<double>(a.count);
  }
  r.in_before = in_bn > 0 ? in_b / in_bn : 0;
  r.in_after = in_an > 0 ? in_a / in_an : 0;
  r.out_before = out_bn > 0 ? out_b / out_bn : 0;
  r.out_after = out_an > 0 ? out_a / out_an : 0;
  if (r.in_before > 0 && in_an > 0) r.in_window_drop = 100.0 * (r.in_before - r.in_after) / r.in_before;
  if (r.out_before > 0 && out_an > 0) r.out_window_drop = 100.0 * (r.out_before - r.out_after) / r.out_before;
  return r;
}

CommitmentStats mode_commitment(const std::vector<ScoredRollout>& rollouts, double top_fraction) {
  if (!(top_fraction > 0 && top_fraction <= 1)) throw ConfigError("commitment: top fraction must be in (0, 1]");
  std::vector<const distill::PerTokenStats*> tokens;
  for (const auto& r : rollouts) {
    for (const auto& s : r.stats) {
      if (s.aligned) tokens.push_back(&s);
    }
  }
  const auto take = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(tokens.size()) - 1e-9));
  if (take < 10) {
    throw InsufficientDataError("commitment: " + std::to_string(take) + " selected tokens, need at least 10");
  }
  std::stable_sort(tokens.begin(), tokens.end(), [](auto* a, auto* b) { return a->kl > b->kl; });
  CommitmentStats c;
  c.top_fraction = top_fraction;
  c.n = take;
  std::size_t top1 = 0, top5 = 0, outside = 0;
  double prob = 0;
  for (std::size_t i = 0; i < take; ++i) {
    const auto rank = tokens[i]->argmax_teacher_rank;
    if (rank == 1) {
      ++top1;
    } else if (rank <= 5) {
      ++top5;
    } else {
      ++outside;
    }
    prob += tokens[i]->student_top1;
  }
  const double n = static_cast<double>(take);
  c.top1_pct = 100.0 * static_cast<double>(top1) / n;
  c.top2to5_pct = 100.0 * static_cast<double>(top5) / n;
  c.outside_top5_pct = 100.0 * static_cast<double>(outside) / n;
  c.mean_top1_prob = prob / n;
  return c;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

LengthStats length_stats(std::span<const std::size_t> lengths, std::optional<double> reference_mean) {
  if (lengths.empty()) throw ConfigError("length_stats: no rollouts");
  std::vector<double> v(lengths.begin(), lengths.end());
  LengthStats s;
  s.p10 = percentile(v, 0.1);
  s.p50 = percentile(v, 0.5);
  s.p90 = percentile(v, 0.9);
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (reference_mean && *reference_mean > 0) s.ratio_to_reference = s.mean / *reference_mean;
  return s;
}

const char* to_string(Category c) {
  switch (c) {
    case Category::Planning: return "planning";
    case Category::Structural: return "structural";
    case Category::MathNumber: return "math_number";
    case Category::MathOperator: return "math_operator";
    case Category::MathLatex: return "math_latex";
    case Category::Continuation: return "continuation";
  }
  return "?";
}

Category parse_category(std::string_view name) {
  for (Category c : kCategories) {
    if (name == to_string(c)) return c;
  }
  throw ConfigError("unknown token category '" + std::string(name) + "'");
}

namespace {

std::string unescape_arg(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out += s[i];
      continue;
    }
    const char e = s[++i];
    out += e == 's' ? ' ' : e == 't' ? '\t' : e == 'n' ? '\n' : e;
  }
  return out;
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; });
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\n\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\n\r") - b + 1);
}

bool matches(const CategoryRules::Rule& r, std::string_view text) {
  if (r.matcher == "blank") return is_blank(text);
  if (r.matcher == "keyword") {
    const auto t = trim(text);
    return std::find(r.args.begin(), r.args.end(), t) != r.args.end();
  }
  if (r.matcher == "contains") {
    return std::any_of(r.args.begin(), r.args.end(),
                       [&](const std::string& a) { return text.find(a) != std::string_view::npos; });
  }
  std::string set;
  for (const auto& a : r.args) set += a;
  return !text.empty() && std::all_of(text.begin(), text.end(), [&](char c) { return set.find(c) != std::string::npos; });
}

}  // namespace

CategoryRules CategoryRules::parse(std::string_view text) {
  CategoryRules out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream words{std::string(t)};
    std::string category, matcher, arg;
    words >> category >> matcher;
    Rule r;
    try {
      r.category = parse_category(category);
    } catch (const ConfigError& e) {
      throw ConfigParseError(e.what(), line_no);
    }
    if (matcher != "keyword" && matcher != "all_in" && matcher != "contains" && matcher != "blank") {
      throw ConfigParseError("unknown matcher '" + matcher + "'", line_no);
    }
    r.matcher = matcher;
    while (words >> arg) r.args.push_back(unescape_arg(arg));
    if (matcher != "blank" && r.args.empty()) throw ConfigParseError("matcher '" + matcher + "' needs arguments", line_no);
    out.rules.push_back(std::move(r));
  }
  return out;
}

CategoryRules CategoryRules::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read category rules " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string_view CategoryRules::builtin_text() {
  static const std::string text = R"rules(# Token category rules, checked in the fixed order
# planning, structural, math_number, math_operator, math_latex, continuation.
# <category> <matcher> <args...>; \s \t \n \\ escape space, tab, newline, backslash.

planning keyword To Let First Step We Given Therefore Thus Since answer: sort: bal:
structural blank
structural all_in .,;:!?()[]{}'"`_|\s\t\n
math_number all_in 0123456789
math_operator all_in +-*/=<>^
math_latex contains \\( \\[ \\) \\] $
)rules";
  return text;
}

CategoryRules CategoryRules::builtin() { return parse(builtin_text()); }

Category classify_token(std::string_view text, const CategoryRules& rules) {
  if (text.empty()) return Category::Structural;
  for (Category c : kCategories) {
    if (c == Category::Continuation) break;
    for (const auto& r : rules.rules) {
      if (r.category == c && matches(r, text)) return c;
    }
  }
  return Category::Continuation;
}

std::vector<CategoryStat> category_profile(const std::vector<ScoredRollout>& rollouts, const tok::Tokenizer& tok,
                                           const CategoryRules& rules) {
  std::vector<CategoryStat> out;
  for (Category c : kCategories) out.push_back({c});
  for (const auto& r : rollouts) {
    for (const auto& s : r.stats) {
      if (!s.aligned) continue;
      auto& cs = out[static_cast<std::size_t>(classify_token(tok.text(r.rollout.response[s.position]), rules))];
      ++cs.count;
      cs.mean_kl += s.kl;
    }
  }
  for (auto& cs : out) {
    if (cs.count) cs.mean_kl /= static_cast<double>(cs.count);
  }
  return out;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman: need two equal-length samples of size >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace esr::probes
