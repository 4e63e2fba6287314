#include <doctest.h>

#include "esr/errors.hpp"
#include "esr/lm/student.hpp"
#include "esr/lm/teacher.hpp"
#include "esr/probes/probes.hpp"

#include <cmath>
#include <fstream>
#include <random>

using namespace esr;
using namespace esr::probes;

namespace {

PositionProfile flat(std::vector<double> kl, std::size_t count = 10) {
  PositionProfile p;
  for (std::size_t i = 0; i < kl.size(); ++i) p.buckets.push_back({i, i + 1, count, kl[i], 0, 0});
  return p;
}

ScoredRollout with_ranks(const std::vector<std::pair<double, std::size_t>>& kl_rank) {
  ScoredRollout r;
  for (std::size_t i = 0; i < kl_rank.size(); ++i) {
    distill::PerTokenStats s;
    s.position = i;
    s.aligned = true;
    s.kl = kl_rank[i].first;
    s.argmax_teacher_rank = kl_rank[i].second;
    s.student_top1 = 0.5;
    r.stats.push_back(s);
  }
  return r;
}

}  // namespace

TEST_CASE("cascade report examples") {
  const auto before = flat({1.0, 1.0, 1.0, 1.0});
  const auto r = cascade_report(before, flat({0.2, 0.2, 0.65, 0.65}), 2);
  CHECK(std::abs(*r.in_window_drop - 80.0) < 1e-12);
  CHECK(std::abs(*r.out_window_drop - 35.0) < 1e-12);

  const auto full = cascade_report(before, flat({0.0, 0.0, 0.0, 0.0}), 2);
  CHECK(std::abs(*full.out_window_drop - 100.0) < 1e-12);

  const auto na = cascade_report(flat({1.0, 1.0, 0.0, 0.0}), flat({0.5, 0.5, 0.0, 0.0}), 2);
  CHECK(std::abs(*na.in_window_drop - 50.0) < 1e-12);
  CHECK_FALSE(na.out_window_drop.has_value());

  CHECK_THROWS_AS(cascade_report(before, flat({1.0}), 2), ConfigError);
}

TEST_CASE("profile buckets average over aligned tokens only") {
  ScoredRollout r = with_ranks({{1.0, 1}, {3.0, 1}, {5.0, 1}});
  r.stats[1].aligned = false;
  const auto p = profile_from({r, r}, 4, 2);
  REQUIRE(p.buckets.size() == 2);
  CHECK(p.buckets[0].count == 2);
  CHECK(p.buckets[0].mean_kl == 1.0);
  CHECK(p.buckets[1].count == 2);
  CHECK(p.buckets[1].mean_kl == 5.0);
  CHECK(profile_from({r}, 5, 2).buckets.back().end == 5);
  CHECK_THROWS_AS(profile_from({r}, 0), ConfigError);
}

TEST_CASE("student equal to teacher gives zero KL") {
  const auto tok = tok::Tokenizer::default_char();
  const auto teacher = lm::MarkovTeacher::random_stationary(tok, 12, 0.3, 0.05, true);
  SampleOptions o;
  o.max_length = 20;
  o.samples = 3;
  const auto prof = position_profile(teacher, teacher, {"1+1=", "22+3="}, o);
  CHECK(prof.buckets.size() == 20);
  for (const auto& b : prof.buckets) CHECK(std::abs(b.mean_kl) < 1e-12);
  CHECK(prof.buckets[0].count == 6);
}

TEST_CASE("deterministic teacher has zero entropy") {
  const auto tok = tok::Tokenizer::char_level("ab");
  grad::Vector to_a = grad::Vector::Zero(5);
  to_a(3) = 1;
  const lm::MarkovTeacher teacher(tok, 1, to_a, to_a, {});
  lm::StudentConfig c;
  c.width = 8;
  c.vocab = static_cast<int>(tok.vocab_size());
  c.max_context = 64;
  lm::StudentModel student(c);
  lm::StudentPolicy policy(student, tok);
  SampleOptions o;
  o.max_length = 10;
  o.samples = 4;
  for (const auto& r : sample_scored(policy, teacher, {"ab"}, o)) {
    for (const auto& s : r.stats) {
      CHECK(s.teacher_entropy == 0.0);
      CHECK(s.student_entropy > 0.0);
    }
  }
}

TEST_CASE("teacher decay curve") {
  const auto tok = tok::Tokenizer::default_merge();
  const lm::ScriptedTaskTeacher teacher(tok, 0.01, "#@~$%&");
  const auto suite = tasks::generate_suite(tasks::TaskKind::Addition, {1, 4}, 10, 3);
  DecayOptions o;
  o.t_grid = {0, 1, 4};
  o.k = 2;
  // A perfect prefix source: the teacher itself at temperature 0.
  o.prefix_temperature = 0;
  const auto c = teacher_decay_curve(teacher, teacher, suite, o);
  CHECK(c.samples_per_point == 20);
  CHECK(c.delta[0] == 0.0);
  CHECK(c.accuracy[0] > 0.8);

  o.t_grid = {1, 4};
  CHECK_THROWS_AS(teacher_decay_curve(teacher, teacher, suite, o), ConfigError);
  o.t_grid = {0, 4, 4};
  CHECK_THROWS_AS(teacher_decay_curve(teacher, teacher, suite, o), ConfigError);
  o.t_grid = {0};
  o.k = 0;
  CHECK_THROWS_AS(teacher_decay_curve(teacher, teacher, suite, o), ConfigError);
}

TEST_CASE("mode commitment partitions the selected tokens") {
  std::mt19937_64 rng(2);
  std::vector<std::pair<double, std::size_t>> toks;
  for (int i = 0; i < 137; ++i) toks.push_back({static_cast<double>(rng() % 100) / 10.0, 1 + rng() % 9});
  for (double f : {0.1, 0.25, 0.5, 1.0}) {
    const auto c = mode_commitment({with_ranks(toks)}, f);
    CHECK(c.n == static_cast<std::size_t>(std::ceil(f * 137)));
    CHECK(std::abs(c.top1_pct + c.top2to5_pct + c.outside_top5_pct - 100.0) < 1e-9);
    CHECK(c.mean_top1_prob == doctest::Approx(0.5));
  }

  std::vector<std::pair<double, std::size_t>> all_top1(100, {1.0, 1});
  const auto c = mode_commitment({with_ranks(all_top1)}, 0.1);
  CHECK(c.n == 10);
  CHECK(c.top1_pct == 100.0);
  CHECK(c.top2to5_pct == 0.0);
  CHECK(c.outside_top5_pct == 0.0);

  // The highest-KL decile only.
  std::vector<std::pair<double, std::size_t>> split;
  for (int i = 0; i < 90; ++i) split.push_back({0.1, 1});
  for (int i = 0; i < 10; ++i) split.push_back({2.0, 7});
  CHECK(mode_commitment({with_ranks(split)}, 0.1).outside_top5_pct == 100.0);

  CHECK_THROWS_AS(mode_commitment({with_ranks(std::vector<std::pair<double, std::size_t>>(89, {1.0, 1}))}, 0.1),
                  InsufficientDataError);
  CHECK_THROWS_AS(mode_commitment({with_ranks(all_top1)}, 0.0), ConfigError);
  CHECK_THROWS_AS(mode_commitment({with_ranks(all_top1)}, 1.5), ConfigError);
}

TEST_CASE("length statistics") {
  const std::vector<std::size_t> ten = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto s = length_stats(ten, 11.0);
  CHECK(s.p50 == 5.5);
  CHECK(s.mean == 5.5);
  CHECK(std::abs(s.p10 - 1.9) < 1e-12);
  CHECK(std::abs(s.p90 - 9.1) < 1e-12);
  CHECK(*s.ratio_to_reference == 0.5);
  const std::vector<std::size_t> one = {42};
  const auto o = length_stats(one);
  CHECK(o.p10 == 42);
  CHECK(o.p50 == 42);
  CHECK(o.p90 == 42);
  CHECK_FALSE(o.ratio_to_reference.has_value());
  CHECK_THROWS_AS(length_stats(std::vector<std::size_t>{}), ConfigError);
}

TEST_CASE("token categories with the shipped rules") {
  const auto rules = CategoryRules::load(std::filesystem::path(ESR_DATA_DIR) / "token_categories.txt");
  CHECK(classify_token("First", rules) == Category::Planning);
  CHECK(classify_token(" Therefore ", rules) == Category::Planning);
  CHECK(classify_token("answer:", rules) == Category::Planning);
  CHECK(classify_token("7", rules) == Category::MathNumber);
  CHECK(classify_token("123", rules) == Category::MathNumber);
  CHECK(classify_token("+", rules) == Category::MathOperator);
  CHECK(classify_token("\\(", rules) == Category::MathLatex);
  CHECK(classify_token(",", rules) == Category::Structural);
  CHECK(classify_token(" ", rules) == Category::Structural);
  CHECK(classify_token("", rules) == Category::Structural);
  CHECK(classify_token("banana", rules) == Category::Continuation);
  CHECK(classify_token("7a", rules) == Category::Continuation);
  for (Category c : kCategories) CHECK(parse_category(to_string(c)) == c);

  // Every byte string gets exactly one category, the same one every time.
  std::mt19937_64 rng(4);
  for (int i = 0; i < 5000; ++i) {
    std::string s(rng() % 6, ' ');
    for (auto& ch : s) ch = static_cast<char>(32 + rng() % 95);
    const Category c = classify_token(s, rules);
    CHECK(classify_token(s, rules) == c);
  }
}

TEST_CASE("category rule parsing") {
  const auto r = CategoryRules::parse("# comment\n\nmath_number all_in 0123\\s\nplanning keyword Step\n");
  REQUIRE(r.rules.size() == 2);
  CHECK(r.rules[0].args[0] == "0123 ");
  CHECK(classify_token("Step", r) == Category::Planning);
  CHECK(classify_token("0 1", r) == Category::MathNumber);
  try {
    CategoryRules::parse("planning keyword a\nnonsense keyword b\n");
    FAIL("expected a parse error");
  } catch (const ConfigParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(CategoryRules::parse("planning regex a\n"), ConfigParseError);
  CHECK_THROWS_AS(CategoryRules::load("/nonexistent/rules.txt"), IoError);
}

TEST_CASE("category profile") {
  const auto tok = tok::Tokenizer::default_char();
  const auto rules = CategoryRules::load(std::filesystem::path(ESR_DATA_DIR) / "token_categories.txt");
  ScoredRollout r = with_ranks({{1.0, 1}, {3.0, 1}, {5.0, 1}});
  r.rollout.response = tok.encode("7+a");
  const auto prof = category_profile({r}, tok, rules);
  for (const auto& s : prof) {
    if (s.category == Category::MathNumber) CHECK(s.mean_kl == 1.0);
    if (s.category == Category::MathOperator) CHECK(s.mean_kl == 3.0);
    if (s.category == Category::Continuation) CHECK(s.mean_kl == 5.0);
    if (s.category == Category::Planning) CHECK(s.count == 0);
  }
}

TEST_CASE("spearman correlation") {
  const std::vector<double> x = {1, 2, 3, 4, 5};
  CHECK(spearman(x, std::vector<double>{2, 4, 6, 8, 10}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>{1, 1, 1, 1, 1}) == 0.0);
  // Ties use average ranks: ranks of y are {1.5, 1.5, 3, 4, 5}.
  const double rho = spearman(x, std::vector<double>{1, 1, 2, 3, 4});
  CHECK(rho == doctest::Approx(0.9746794344808963));
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), ConfigError);
  CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2}), ConfigError);
}

TEST_CASE("built-in category rules match the shipped file") {
  std::ifstream in(std::filesystem::path(ESR_DATA_DIR) / "token_categories.txt", std::ios::binary);
  const std::string file{std::istreambuf_iterator<char>(in), {}};
  CHECK(file == CategoryRules::builtin_text());
  CHECK(CategoryRules::builtin().rules.size() == 6);
}
