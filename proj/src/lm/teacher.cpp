#include "esr/lm/teacher.hpp"

#include "esr/errors.hpp"
#include "esr/tasks/task.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

namespace esr::lm {

using nlohmann::json;

void MarkovTeacher::check_row(const Vector& row, const char* what) const {
  if (row.size() != static_cast<Eigen::Index>(tokenizer_.vocab_size())) {
    throw ConfigError(std::string("markov teacher: ") + what + " row has wrong length");
  }
  if ((row.array() < 0).any() || !row.allFinite()) {
    throw ConfigError(std::string("markov teacher: ") + what + " row has negative or non-finite entries");
  }
  if (std::abs(row.sum() - 1.0) > 1e-12) {
    throw ConfigError(std::string("markov teacher: ") + what + " row does not sum to 1");
  }
}

MarkovTeacher::MarkovTeacher(tok::Tokenizer tokenizer, int order, Vector initial, Vector fallback,
                             std::map<Context, Vector> rows)
    : tokenizer_(std::move(tokenizer)),
      order_(order),
      initial_(std::move(initial)),
      fallback_(std::move(fallback)),
      rows_(std::move(rows)) {
  if (order_ < 1) throw ConfigError("markov teacher: order must be >= 1");
  check_row(initial_, "initial");
  check_row(fallback_, "default");
  for (const auto& [ctx, row] : rows_) {
    if (ctx.empty() || static_cast<int>(ctx.size()) > order_) {
      throw ConfigError("markov teacher: context length must be in [1, order]");
    }
    check_row(row, "transition");
  }
}

void MarkovTeacher::set_trap(std::set<TokenId> trap_tokens, Vector degraded_fallback,
                             std::map<Context, Vector> degraded_rows) {
  check_row(degraded_fallback, "degraded default");
  for (const auto& [_, row] : degraded_rows) check_row(row, "degraded");
  trap_ = std::move(trap_tokens);
  degraded_fallback_ = std::move(degraded_fallback);
  degraded_rows_ = std::move(degraded_rows);
}

bool MarkovTeacher::trapped(std::span<const TokenId> context) const {
  if (trap_.empty()) return false;
  for (TokenId t : context) {
    if (trap_.count(t)) return true;
  }
  return false;
}

const Vector& MarkovTeacher::next_distribution(std::span<const TokenId> context) const {
  if (context.empty()) return initial_;
  const std::size_t k = std::min(context.size(), static_cast<std::size_t>(order_));
  const Context key(context.end() - static_cast<std::ptrdiff_t>(k), context.end());
  if (trapped(context)) {
    auto it = degraded_rows_.find(key);
    return it == degraded_rows_.end() ? degraded_fallback_ : it->second;
  }
  auto it = rows_.find(key);
  return it == rows_.end() ? fallback_ : it->second;
}

MarkovTeacher MarkovTeacher::random_stationary(tok::Tokenizer tokenizer, std::uint64_t seed,
                                               double concentration, double smoothing, bool include_eos) {
  if (concentration <= 0) throw ConfigError("markov teacher: concentration must be > 0");
  if (smoothing < 0 || smoothing > 1) throw ConfigError("markov teacher: smoothing must be in [0, 1]");
  const auto V = static_cast<Eigen::Index>(tokenizer.vocab_size());
  std::vector<TokenId> support;
  if (include_eos) support.push_back(tok::Tokenizer::kEos);
  for (TokenId t = tok::Tokenizer::kFirstText; t < V; ++t) support.push_back(t);
  const double n = static_cast<double>(support.size());

  Rng rng(derive_seed(seed, {0x3a7cULL}));
  std::gamma_distribution<double> gamma(concentration, 1.0);
  auto draw_row = [&] {
    Vector row = Vector::Zero(V);
    double total = 0;
    for (TokenId t : support) total += row(t) = gamma(rng);
    for (TokenId t : support) row(t) = (1 - smoothing) * row(t) / total + smoothing / n;
    return Vector(row / row.sum());
  };

  std::map<Context, Vector> rows;
  Vector uniform = Vector::Zero(V);
  for (TokenId t : support) uniform(t) = 1.0 / n;
  uniform /= uniform.sum();
  for (TokenId t : support) rows[{t}] = draw_row();

  // Stationary distribution by power iteration.
  Vector pi = uniform;
  for (int it = 0; it < 10000; ++it) {
    Vector next = Vector::Zero(V);
    for (TokenId t : support) next += pi(t) * rows.at({t});
    next /= next.sum();
    const double diff = (next - pi).lpNorm<1>();
    pi = next;
    if (diff < 1e-15) break;
  }
  return MarkovTeacher(std::move(tokenizer), 1, pi, uniform, std::move(rows));
}

namespace {

class MarkovSession : public DecodeSession {
 public:
  explicit MarkovSession(const MarkovTeacher& t) : teacher_(&t) {}
  TokenScores next() override { return TokenScores::probabilities(teacher_->next_distribution(context_)); }
  void push(TokenId id) override { context_.push_back(id); }

 private:
  const MarkovTeacher* teacher_;
  std::vector<TokenId> context_;
};

json row_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector row_from(const json& j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json table_json(const std::map<MarkovTeacher::Context, Vector>& rows) {
  json out = json::array();
  for (const auto& [ctx, row] : rows) out.push_back({{"context", ctx}, {"probs", row_json(row)}});
  return out;
}

std::map<MarkovTeacher::Context, Vector> table_from(const json& j) {
  std::map<MarkovTeacher::Context, Vector> out;
  for (const auto& r : j) out[r.at("context").get<MarkovTeacher::Context>()] = row_from(r.at("probs"));
  return out;
}

}  // namespace

std::unique_ptr<DecodeSession> MarkovTeacher::start(std::span<const TokenId>) const {
  return std::make_unique<MarkovSession>(*this);
}

void MarkovTeacher::save(const std::filesystem::path& path) const {
  json j = {{"format", "esr-markov-teacher"},
            {"version", 1},
            {"tokenizer", tokenizer_.serialize()},
            {"order", order_},
            {"initial", row_json(initial_)},
            {"default", row_json(fallback_)},
            {"rows", table_json(rows_)}};
  if (!trap_.empty()) {
    j["trap_tokens"] = trap_;
    j["degraded_default"] = row_json(degraded_fallback_);
    j["degraded_rows"] = table_json(degraded_rows_);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write teacher table " + path.string());
  out << j.dump(1) << '\n';
}

MarkovTeacher MarkovTeacher::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read teacher table " + path.string());
  try {
    const json j = json::parse(in);
    if (j.at("format") != "esr-markov-teacher" || j.at("version") != 1) {
      throw ConfigError("teacher table: unsupported format in " + path.string());
    }
    MarkovTeacher t(tok::Tokenizer::parse(j.at("tokenizer").get<std::string>()), j.at("order").get<int>(),
                    row_from(j.at("initial")), row_from(j.at("default")), table_from(j.at("rows")));
    if (j.contains("trap_tokens")) {
      t.set_trap(j.at("trap_tokens").get<std::set<TokenId>>(), row_from(j.at("degraded_default")),
                 table_from(j.at("degraded_rows")));
    }
    return t;
  } catch (const json::parse_error& e) {
    throw ConfigParseError(std::string("teacher table: ") + e.what(), 0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("teacher table: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

ScriptedTaskTeacher::ScriptedTaskTeacher(tok::Tokenizer tokenizer, double epsilon, std::string trap_chars)
    : tokenizer_(std::move(tokenizer)), epsilon_(epsilon), trap_chars_(std::move(trap_chars)) {
  if (epsilon_ < 0 || epsilon_ > 1) throw ConfigError("scripted teacher: epsilon must be in [0, 1]");
  for (char c : trap_chars_) {
    if (!tokenizer_.in_alphabet(c)) throw ConfigError("scripted teacher: trap character outside alphabet");
  }
  const auto V = static_cast<Eigen::Index>(tokenizer_.vocab_size());
  uniform_ = Vector::Zero(V);
  uniform_(tok::Tokenizer::kEos) = 1;
  for (Eigen::Index t = tok::Tokenizer::kFirstText; t < V; ++t) uniform_(t) = 1;
  uniform_ /= uniform_.sum();
}

bool ScriptedTaskTeacher::trapped(std::string_view response) const {
  return !trap_chars_.empty() && response.find_first_of(trap_chars_) != std::string_view::npos;
}

Vector ScriptedTaskTeacher::script_row(std::string_view prompt, std::string_view response) const {
  const auto V = static_cast<Eigen::Index>(tokenizer_.vocab_size());
  Vector row = Vector::Zero(V);
  const auto gold = tasks::solve_prompt(prompt);
  const std::string_view delim = tasks::kAnswerDelimiter;
  auto first_token = [&](std::string_view text) { return tokenizer_.encode(text).front(); };
  if (!gold) {
    row(tok::Tokenizer::kEos) = 1;
    return row;
  }
  const bool trap = trapped(response);
  const auto at = response.rfind(delim);
  if (at == std::string_view::npos) {
    // Longest suffix of the response that is a proper prefix of the delimiter.
    std::size_t k = std::min(response.size(), delim.size() - 1);
    while (k > 0 && response.substr(response.size() - k) != delim.substr(0, k)) --k;
    row(first_token(delim.substr(k))) = 1;
    return row;
  }
  const std::string_view typed = response.substr(at + delim.size());
  const bool numeric = gold->find_first_not_of("0123456789") == std::string::npos;
  if (trap && numeric) {
    const bool digits = typed.find_first_not_of("0123456789") == std::string_view::npos;
    if (digits && typed.size() < gold->size()) {
      for (char c = '0'; c <= '9'; ++c) row(*tokenizer_.find(std::string(1, c))) += 0.1;
    } else {
      row(tok::Tokenizer::kEos) = 1;
    }
    return row;
  }
  std::vector<std::string> candidates;
  if (trap) {
    candidates = {"yes", "no"};
  } else {
    candidates = {*gold};
  }
  const double w = 1.0 / static_cast<double>(candidates.size());
  for (const std::string& c : candidates) {
    if (typed.size() < c.size() && std::string_view(c).substr(0, typed.size()) == typed) {
      row(first_token(std::string_view(c).substr(typed.size()))) += w;
    } else {
      row(tok::Tokenizer::kEos) += w;
    }
  }
  return row;
}

Vector ScriptedTaskTeacher::next_distribution(std::string_view prompt, std::string_view response) const {
  Vector row = (1 - epsilon_) * script_row(prompt, response) + epsilon_ * uniform_;
  return row / row.sum();
}

namespace {

class ScriptedSession : public DecodeSession {
 public:
  ScriptedSession(const ScriptedTaskTeacher& t, std::string prompt) : teacher_(&t), prompt_(std::move(prompt)) {}
  TokenScores next() override {
    return TokenScores::probabilities(teacher_->next_distribution(prompt_, response_));
  }
  void push(TokenId id) override { response_ += teacher_->tokenizer().text(id); }

 private:
  const ScriptedTaskTeacher* teacher_;
  std::string prompt_, response_;
};

}  // namespace

std::unique_ptr<DecodeSession> ScriptedTaskTeacher::start(std::span<const TokenId> prompt) const {
  return std::make_unique<ScriptedSession>(*this, tokenizer_.decode(prompt));
}

}  // namespace esr::lm
