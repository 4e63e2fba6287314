#include "esr/tasks/task.hpp"

#include "esr/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>

namespace esr::tasks {

using nlohmann::json;

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Addition: return "addition";
    case TaskKind::DigitSort: return "digit-sort";
    case TaskKind::BracketBalance: return "bracket-balance";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "addition") return TaskKind::Addition;
  if (name == "digit-sort") return TaskKind::DigitSort;
  if (name == "bracket-balance") return TaskKind::BracketBalance;
  throw ConfigError("unsupported task kind '" + std::string(name) + "'");
}

namespace {

std::string random_digits(Rng& rng, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += static_cast<char>('0' + uniform_index(rng, 10));
  return s;
}

bool balanced(std::string_view brackets) {
  int depth = 0;
  for (char c : brackets) {
    depth += c == '(' ? 1 : -1;
    if (depth < 0) return false;
  }
  return depth == 0;
}

bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

std::string strip_leading_zeros(std::string s) {
  const auto nz = s.find_first_not_of('0');
  return nz == std::string::npos ? "0" : s.substr(nz);
}

}  // namespace

Task generate_task(TaskKind kind, const Difficulty& difficulty, Rng& rng) {
  Task t;
  t.kind = kind;
  t.difficulty = difficulty;
  switch (kind) {
    case TaskKind::Addition: {
      if (difficulty.operand_digits < 1 || difficulty.operand_digits > 4) {
        throw ConfigError("addition: operand_digits must be in [1, 4]");
      }
      std::uint64_t bound = 1;
      for (int i = 0; i < difficulty.operand_digits; ++i) bound *= 10;
      const std::uint64_t a = uniform_index(rng, bound);
      const std::uint64_t b = uniform_index(rng, bound);
      t.prompt = std::to_string(a) + "+" + std::to_string(b) + "=";
      t.gold = std::to_string(a + b);
      break;
    }
    case TaskKind::DigitSort: {
      if (difficulty.list_length < 1 || difficulty.list_length > 12) {
        throw ConfigError("digit-sort: list_length must be in [1, 12]");
      }
      const std::string digits = random_digits(rng, difficulty.list_length);
      t.prompt = "sort:" + digits + "=";
      t.gold = digits;
      std::sort(t.gold.begin(), t.gold.end());
      break;
    }
    case TaskKind::BracketBalance: {
      if (difficulty.list_length < 1 || difficulty.list_length > 12) {
        throw ConfigError("bracket-balance: list_length must be in [1, 12]");
      }
      std::string s;
      for (int i = 0; i < difficulty.list_length; ++i) s += uniform_index(rng, 2) == 0 ? '(' : ')';
      t.prompt = "bal:" + s + "=";
      t.gold = balanced(s) ? "yes" : "no";
      break;
    }
    default:
      throw ConfigError("unsupported task kind");
  }
  return t;
}

std::vector<Task> generate_suite(TaskKind kind, const Difficulty& difficulty, std::size_t count,
                                 std::uint64_t seed) {
  std::vector<Task> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, {i});
    Rng rng(s);
    Task t = generate_task(kind, difficulty, rng);
    t.seed = s;
    out.push_back(std::move(t));
  }
  return out;
}

std::optional<std::string> solve_prompt(std::string_view prompt) {
  if (prompt.empty() || prompt.back() != '=') return std::nullopt;
  std::string_view body = prompt.substr(0, prompt.size() - 1);
  if (body.starts_with("sort:")) {
    std::string digits(body.substr(5));
    if (!all_digits(digits)) return std::nullopt;
    std::sort(digits.begin(), digits.end());
    return digits;
  }
  if (body.starts_with("bal:")) {
    body.remove_prefix(4);
    if (body.empty() || body.find_first_not_of("()") != std::string_view::npos) return std::nullopt;
    return std::string(balanced(body) ? "yes" : "no");
  }
  const auto plus = body.find('+');
  if (plus == std::string_view::npos) return std::nullopt;
  const std::string a(body.substr(0, plus)), b(body.substr(plus + 1));
  if (!all_digits(a) || !all_digits(b) || a.size() > 9 || b.size() > 9) return std::nullopt;
  return strip_leading_zeros(std::to_string(std::stoull(a) + std::stoull(b)));
}

std::optional<std::string> extract_answer(std::string_view response) {
  const auto at = response.rfind(kAnswerDelimiter);
  if (at == std::string_view::npos) return std::nullopt;
  std::string_view rest = response.substr(at + kAnswerDelimiter.size());
  std::string out;
  bool pending_space = false;
  for (char c : rest) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

bool verify_response(const Task& task, std::string_view response) {
  const auto answer = extract_answer(response);
  return answer.has_value() && !answer->empty() && *answer == task.gold;
}

void save_suite(const std::vector<Task>& tasks, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write task suite " + path.string());
  for (const Task& t : tasks) {
    json j = {{"prompt", t.prompt},
              {"gold", t.gold},
              {"kind", to_string(t.kind)},
              {"difficulty", {{"operand_digits", t.difficulty.operand_digits},
                              {"list_length", t.difficulty.list_length}}},
              {"seed", t.seed}};
    out << j.dump() << '\n';
  }
}

std::vector<Task> load_suite(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read task suite " + path.string());
  std::vector<Task> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Task t;
      t.prompt = j.at("prompt").get<std::string>();
      t.gold = j.at("gold").get<std::string>();
      t.kind = parse_task_kind(j.at("kind").get<std::string>());
      t.difficulty.operand_digits = j.at("difficulty").at("operand_digits").get<int>();
      t.difficulty.list_length = j.at("difficulty").at("list_length").get<int>();
      t.seed = j.at("seed").get<std::uint64_t>();
      out.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw ConfigParseError(std::string("task suite: ") + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace esr::tasks
