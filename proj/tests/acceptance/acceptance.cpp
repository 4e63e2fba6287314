// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails. Optional arguments select criteria by number.
#include "esr/distill/trainer.hpp"
#include "esr/errors.hpp"
#include "esr/grad/grad_check.hpp"
#include "esr/lm/teacher.hpp"
#include "esr/probes/probes.hpp"
#include "esr/runner/runner.hpp"
#include "esr/tasks/eval.hpp"
#include "esr/xtok/alignment.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unistd.h>

using namespace esr;
namespace fs = std::filesystem;
using nlohmann::json;
using grad::Index;
using grad::Matrix;
using grad::Vector;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_work;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<json> jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

lm::StudentConfig student_config(const tok::Tokenizer& tok, std::uint64_t seed, int max_context = 1024) {
  lm::StudentConfig c;
  c.vocab = static_cast<int>(tok.vocab_size());
  c.seed = seed;
  c.max_context = max_context;
  return c;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  const std::vector<int> ids = {1, 0, 2, 2};
  const std::vector<int> picks = {0, 2, 1};
  using Build = std::function<grad::Var(grad::Graph&, grad::Var, std::mt19937_64&)>;
  const std::vector<std::tuple<const char*, Index, Index, Build>> ops = {
      {"matmul", 3, 4, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) { return grad::matmul(x, g.constant(random_matrix(4, 2, r))); }},
      {"matmul_rhs", 4, 2, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) { return grad::matmul(g.constant(random_matrix(3, 4, r)), x); }},
      {"add", 3, 3, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) { return grad::add(x, g.constant(random_matrix(3, 3, r))); }},
      {"sub", 3, 3, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) { return grad::sub(g.constant(random_matrix(3, 3, r)), x); }},
      {"mul", 3, 3, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::mul(x, x); }},
      {"scale", 2, 3, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::scale(x, -1.7); }},
      {"add_row", 1, 4, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) { return grad::add_row(g.constant(random_matrix(3, 4, r)), x); }},
      {"transpose", 2, 3, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::transpose(x); }},
      {"exp", 3, 3, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::exp(x); }},
      {"gelu", 3, 4, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::gelu(x); }},
      {"log_softmax", 3, 5, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::log_softmax(x); }},
      {"softmax", 3, 5, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::softmax(x); }},
      {"layer_norm", 3, 6, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) {
         return grad::layer_norm(x, g.constant(random_matrix(1, 6, r)), g.constant(random_matrix(1, 6, r)));
       }},
      {"layer_norm_gain", 1, 6, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) {
         return grad::layer_norm(g.constant(random_matrix(3, 6, r)), x, g.constant(random_matrix(1, 6, r)));
       }},
      {"layer_norm_bias", 1, 6, [](grad::Graph& g, grad::Var x, std::mt19937_64& r) {
         return grad::layer_norm(g.constant(random_matrix(3, 6, r)), g.constant(random_matrix(1, 6, r)), x);
       }},
      {"gather_rows", 3, 4, [&ids](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::gather_rows(x, ids); }},
      {"pick", 3, 3, [&picks](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::pick(x, picks); }},
      {"mean", 3, 2, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::mean(x); }},
      {"sum", 3, 2, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::sum(x); }},
      {"slice_cols", 2, 5, [](grad::Graph&, grad::Var x, std::mt19937_64&) { return grad::slice_cols(x, 1, 3); }},
      {"concat_cols", 2, 3, [](grad::Graph&, grad::Var x, std::mt19937_64&) {
         const grad::Var parts[] = {x, grad::exp(x), x};
         return grad::concat_cols(parts);
       }},
  };
  double worst_op = 0;
  std::string worst_name = "none";
  for (const auto& [name, rows, cols, build] : ops) {
    for (int point = 0; point < 20; ++point) {
      const std::uint64_t operand_seed = 7000 + static_cast<std::uint64_t>(point);
      grad::Graph probe;
      std::mt19937_64 pr(operand_seed);
      const grad::Var shape = build(probe, probe.input(Matrix::Zero(rows, cols)), pr);
      const Matrix w = random_matrix(shape.rows(), shape.cols(), rng);
      grad::ScalarFn fn = [&build = build, w, operand_seed](grad::Graph& g, grad::Var x) {
        std::mt19937_64 r(operand_seed);
        return grad::sum(grad::mul(build(g, x, r), g.constant(w)));
      };
      const double err = grad::grad_check(fn, random_matrix(rows, cols, rng, 2.0), 1e-5);
      if (err > worst_op) {
        worst_op = err;
        worst_name = name;
      }
    }
  }

  // Full student distillation loss: 2 layers, width 64, adapters on, every parameter kind sampled.
  const auto tok = tok::Tokenizer::default_char();
  const auto teacher = lm::MarkovTeacher::random_stationary(tok, 5, 0.3, 0.05, true);
  const auto bridge = distill::VocabBridge::build(tok, tok);
  double worst_model = 0;
  for (std::uint64_t point = 0; point < 20; ++point) {
    const auto cfg = student_config(tok, 100 + point, 128);
    lm::StudentModel base(cfg);
    // Non-zero up factors so the adapter path carries gradient into both factors.
    auto adapters = lm::make_adapters(base, 4, 8, lm::default_adapter_targets(cfg), point);
    for (auto& [name, p] : adapters.params) p.value = random_matrix(p.value.rows(), p.value.cols(), rng, 0.1);
    lm::StudentModel student = lm::apply_adapters(base, adapters);
    student.set_regime(point % 2 ? lm::Regime::Adapter : lm::Regime::FullFinetune);
    lm::StudentPolicy policy(student, tok);
    distill::RolloutOptions ro;
    ro.max_tokens = 12;
    Rng r(derive_seed(31, {point}));
    const auto scored = distill::score_rollout(distill::generate_rollout(policy, tok.encode("37+45="), ro, r), tok,
                                               teacher, bridge);
    const auto mask = scored.aligned_mask();
    auto loss = [&](grad::Graph& g) { return distill::masked_kl(g, student, scored, mask, 1.0); };
    std::vector<grad::ParamCoord> base_coords, adapter_coords;
    auto named = student.named_trainable();
    for (int c = 0; c < 24; ++c) {
      const auto& [name, p] = named[rng() % named.size()];
      auto& into = student.parameters().count(name) ? base_coords : adapter_coords;
      into.push_back({name, static_cast<Index>(rng() % static_cast<std::uint64_t>(p->value.size()))});
    }
    if (!base_coords.empty()) {
      worst_model = std::max(worst_model, grad::grad_check_parameters(loss, student.parameters(), 1e-5, base_coords));
    }
    if (!adapter_coords.empty()) {
      worst_model = std::max(worst_model,
                             grad::grad_check_parameters(loss, student.adapters()->params, 1e-5, adapter_coords));
    }
  }
  const double secs = since(t0);
  return {worst_op < 1e-3 && worst_model < 1e-3 && secs < 120,
          fmt("ops max rel err %.2e (%s), student loss max rel err %.2e, %.1fs", worst_op, worst_name.c_str(),
              worst_model, secs)};
}

Outcome kl_properties() {
  std::mt19937_64 rng(11);
  std::gamma_distribution<double> gam(0.7, 1.0);
  double min_kl = 1e300, max_self = 0;
  for (int i = 0; i < 10000; ++i) {
    const int n = 2 + static_cast<int>(rng() % 30);
    Vector p(n), q(n);
    for (int j = 0; j < n; ++j) {
      p(j) = gam(rng) + 1e-9;
      q(j) = gam(rng) + 1e-9;
    }
    p /= p.sum();
    q /= q.sum();
    const Vector logp = p.array().log().matrix();
    min_kl = std::min(min_kl, distill::reverse_kl(logp, q));
    max_self = std::max(max_self, std::abs(distill::reverse_kl(logp, p)));
  }
  Vector onehot(2);
  onehot << 0.0, -std::numeric_limits<double>::infinity();
  Vector half(2);
  half << 0.5, 0.5;
  const double ln2 = distill::reverse_kl(onehot, half);
  const bool ok = min_kl >= 0 && max_self < 1e-12 && std::abs(ln2 - std::log(2.0)) <= 1e-12;
  return {ok, fmt("min KL %.3e, max KL(p||p) %.3e, KL([1,0]||[.5,.5]) - ln2 = %.1e", min_kl, max_self,
                  ln2 - std::log(2.0))};
}

Outcome window_degeneracy() {
  const auto tok = tok::Tokenizer::default_char();
  const auto teacher = lm::MarkovTeacher::random_stationary(tok, 9, 0.3, 0.05, true);
  const auto bridge = distill::VocabBridge::build(tok, tok);
  lm::StudentModel student(student_config(tok, 3, 256));
  lm::StudentPolicy policy(student, tok);
  const auto suite = tasks::generate_suite(tasks::TaskKind::Addition, {2, 4}, 100, 17);
  distill::RolloutOptions ro;
  ro.max_tokens = 64;
  double worst = 0;
  std::size_t eos = 0;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    Rng r(derive_seed(5, {i}));
    const auto scored = distill::score_rollout(distill::generate_rollout(policy, tok.encode(suite[i].prompt), ro, r),
                                               tok, teacher, bridge);
    const std::size_t T = scored.rollout.length();
    eos += scored.rollout.stop == lm::StopReason::Eos;
    std::vector<double> kl;
    for (const auto& s : scored.stats) kl.push_back(s.kl);
    for (std::size_t n : {T, T + 1, T + 100}) {
      const auto mask = xtok::project_window_mask(scored.alignment, n, T);
      worst = std::max(worst, std::abs(distill::window_loss(kl, mask) - distill::full_opd_loss(scored)));
    }
  }
  return {worst <= 1e-12, fmt("100 rollouts (%zu ended in EOS), max |ESR(N>=T) - OPD| = %.2e", eos, worst)};
}

Outcome eos_semantics() {
  const std::size_t N = 16;
  std::size_t eos_rollouts = 0, violations = 0, total = 0;
  auto check = [&](const lm::LanguageModel& policy, const tok::Tokenizer& stok, const lm::LanguageModel& teacher,
                   std::uint64_t seed, std::size_t count) {
    const auto bridge = distill::VocabBridge::build(stok, teacher.tokenizer());
    const auto suite = tasks::generate_suite(tasks::TaskKind::Addition, {2, 4}, count, seed);
    distill::RolloutOptions ro;
    ro.max_tokens = N;
    ro.limit_reason = lm::StopReason::Cutoff;
    for (std::size_t i = 0; i < count; ++i) {
      Rng r(derive_seed(seed, {i}));
      const auto scored = distill::score_rollout(
          distill::generate_rollout(policy, stok.encode(suite[i].prompt), ro, r), stok, teacher, bridge);
      ++total;
      const auto& roll = scored.rollout;
      if (roll.stop != lm::StopReason::Eos) {
        violations += roll.length() != N || roll.stop != lm::StopReason::Cutoff;
        continue;
      }
      ++eos_rollouts;
      const std::size_t T = roll.length();
      const auto mask = xtok::project_window_mask(scored.alignment, N, T);
      std::size_t last = 0;
      for (std::size_t s = 0; s < T; ++s) {
        if (mask[s]) last = s;
      }
      const bool ok = T <= N && roll.response.back() == tok::Tokenizer::kEos && mask[T - 1] && last == T - 1;
      violations += !ok;
    }
  };
  const auto chars = tok::Tokenizer::default_char();
  const auto merge = tok::Tokenizer::default_merge();
  // A Markov chain with EOS mass stands in for a student that stops early.
  const auto chain = lm::MarkovTeacher::random_stationary(chars, 21, 0.3, 0.05, true);
  const auto markov_teacher = lm::MarkovTeacher::random_stationary(chars, 22, 0.3, 0.05, true);
  check(chain, chars, markov_teacher, 1, 1000);
  const lm::ScriptedTaskTeacher scripted(merge, 0.05);
  check(chain, chars, scripted, 2, 500);
  lm::StudentModel student(student_config(merge, 4, 128));
  lm::StudentPolicy policy(student, merge);
  check(policy, merge, scripted, 3, 200);
  check(scripted, merge, scripted, 4, 200);
  return {violations == 0 && eos_rollouts > 100,
          fmt("%zu rollouts, %zu stopped at EOS, %zu violations", total, eos_rollouts, violations)};
}

xtok::AlignmentMap brute_force(const std::vector<tok::TokenSpan>& s, const std::vector<tok::TokenSpan>& t) {
  xtok::AlignmentMap out;
  out.student_tokens = s.size();
  for (const auto& a : s) {
    for (const auto& b : t) {
      if (a.begin == b.begin && a.end == b.end) out.pairs.emplace_back(a.token_index, b.token_index);
    }
  }
  out.coverage = s.empty() ? 1.0 : static_cast<double>(out.pairs.size()) / static_cast<double>(s.size());
  return out;
}

Outcome alignment_oracle() {
  const auto chars = tok::Tokenizer::default_char();
  const auto merge = tok::Tokenizer::default_merge();
  const auto merges = tok::default_merges();
  const std::string_view alpha = tok::default_alphabet();
  std::mt19937_64 rng(555);
  std::size_t mismatches = 0, identity_failures = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string text;
    const std::size_t pieces = rng() % 80;
    for (std::size_t p = 0; p < pieces; ++p) {
      if (rng() % 3 == 0) text += merges[rng() % merges.size()];
      else text += alpha[rng() % alpha.size()];
    }
    const auto s = chars.encode_with_spans(text).spans;
    const auto t = merge.encode_with_spans(text).spans;
    mismatches += xtok::align_tokenizations(s, t) != brute_force(s, t);
    mismatches += xtok::align_tokenizations(t, s) != brute_force(t, s);
    identity_failures += xtok::align_tokenizations(s, s).coverage != 1.0;
    identity_failures += xtok::align_tokenizations(t, t).coverage != 1.0;
  }
  return {mismatches == 0 && identity_failures == 0,
          fmt("1000 fuzzed strings, %zu oracle mismatches, %zu identity coverage failures", mismatches,
              identity_failures)};
}

Outcome selection_oracle() {
  std::mt19937_64 rng(99);
  std::size_t cases = 0, mismatches = 0, tie_cases = 0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t n = 1 + rng() % 40;
    const std::size_t k = 1 + rng() % 48;
    const bool coarse = c % 2 == 0;
    std::vector<distill::PerTokenStats> stats(n);
    std::uniform_real_distribution<double> u(0, 3);
    for (std::size_t i = 0; i < n; ++i) {
      stats[i].position = i;
      stats[i].kl = coarse ? static_cast<double>(rng() % 4) : u(rng);
      stats[i].student_entropy = coarse ? static_cast<double>(rng() % 3) : u(rng);
      stats[i].teacher_entropy = coarse ? static_cast<double>(rng() % 2) : u(rng);
    }
    tie_cases += coarse;
    for (auto strategy : distill::kAllStrategies) {
      ++cases;
      std::vector<bool> expect(n, false);
      const std::size_t take = std::min(n, k);
      if (strategy == distill::Strategy::FullOpd) {
        expect.assign(n, true);
      } else if (strategy == distill::Strategy::PositionEsr) {
        for (std::size_t i = 0; i < take; ++i) expect[i] = true;
      } else {
        // Full sort by score descending, earlier position first among equals.
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          const double sa = distill::strategy_score(strategy, stats[a]);
          const double sb = distill::strategy_score(strategy, stats[b]);
          return sa != sb ? sa > sb : a < b;
        });
        for (std::size_t i = 0; i < take; ++i) expect[order[i]] = true;
      }
      mismatches += distill::select_tokens(strategy, stats, k) != expect;
    }
  }
  return {mismatches == 0, fmt("%zu strategy/vector cases (%zu vectors with heavy ties), %zu mismatches", cases,
                               tie_cases, mismatches)};
}

// Scripted runs under the work directory ------------------------------------

const char* kCascadeBase = R"({
  "student": {"tokenizer": "char", "max_context": 256},
  "teacher": {"kind": "markov", "tokenizer": "char", "concentration": 0.1, "smoothing": 0.01},
  "task": {"kind": "addition", "operand_digits": 2, "train_problems": 1000, "eval_problems": 10},
  "distill": {"cutoff": 16, "steps": 200, "checkpoint_interval": 200, "batch_size": 16, "allow_eos": false,
              "regime": "adapter", "optimizer": "adam", "learning_rate": 0.001},
  "eval": {"at_checkpoints": false},
  "probes": {"at": [0, 200], "prompts": 64, "max_length": 64, "allow_eos": false, "categories": false}
})";

Outcome cascading_alignment() {
  std::vector<double> drops, in_drops, secs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const fs::path dir = g_work / "cascade" / ("seed-" + std::to_string(seed));
    fs::remove_all(dir);
    const auto cfg = runner::parse_config(runner::apply_overrides(kCascadeBase, {"seed=" + std::to_string(seed)}));
    const auto t0 = Clock::now();
    runner::run_experiment(cfg, dir);
    secs.push_back(since(t0));
    const auto probe = json::parse(slurp(dir / "probes" / "step-000200.json"));
    const auto& c = probe.at("cascade");
    drops.push_back(c.at("out_window_drop_pct").is_null() ? 0.0 : c.at("out_window_drop_pct").get<double>());
    in_drops.push_back(c.at("in_window_drop_pct").is_null() ? 0.0 : c.at("in_window_drop_pct").get<double>());
  }
  const double worst_secs = *std::max_element(secs.begin(), secs.end());
  std::string per_seed;
  for (double d : drops) per_seed += fmt("%s%.1f", per_seed.empty() ? "" : ", ", d);
  return {mean(drops) >= 30.0 && worst_secs <= 600,
          fmt("out-of-window KL drop %.1f%% (seeds: %s), in-window %.1f%%, slowest seed %.0fs", mean(drops),
              per_seed.c_str(), mean(in_drops), worst_secs)};
}

Outcome teacher_decay() {
  const auto cfg = runner::parse_config(R"({
    "seed": 8,
    "teacher": {"kind": "scripted", "trap_chars": "#@~$%&"},
    "task": {"kind": "addition", "operand_digits": 2},
    "probes": {"decay": true, "decay_problems": 500, "decay_k": 4, "decay_t": [0, 4, 8, 16, 32],
               "profile": false, "commitment": false, "lengths": false, "categories": false}
  })");
  runner::Experiment exp(cfg);
  const auto d = json::parse(runner::run_probes(exp, 0)).at("decay");
  const auto delta = d.at("delta").get<std::vector<double>>();
  const auto acc = d.at("accuracy").get<std::vector<double>>();
  const double rho = d.at("spearman_t_delta").get<double>();
  std::string curve;
  const auto t = d.at("t").get<std::vector<std::size_t>>();
  for (std::size_t i = 0; i < t.size(); ++i) curve += fmt("%s%zu:%.3f", curve.empty() ? "" : " ", t[i], delta[i]);
  return {delta.front() == 0.0 && rho > 0.8,
          fmt("A_T(x) = %.3f, delta by t {%s}, spearman %.3f, %zu samples per point", acc.front(), curve.c_str(), rho,
              d.at("samples_per_point").get<std::size_t>())};
}

const char* kSweep = R"({
  "name": "n-sweep",
  "base": {
    "student": {"tokenizer": "merge", "max_context": 600},
    "teacher": {"kind": "scripted", "tokenizer": "merge", "epsilon": 0.02},
    "task": {"kind": "addition", "operand_digits": 1, "train_problems": 1000, "eval_problems": 100},
    "distill": {"max_length": 512, "steps": 200, "checkpoint_interval": 50, "batch_size": 16,
                "regime": "full-finetune", "optimizer": "adam", "learning_rate": 0.001},
    "eval": {"k": 4, "temperature": 0.7, "max_tokens": 64, "seed": 5},
    "probes": {"at": []}
  },
  "cutoffs": [8, 16, 32, 64],
  "full_opd": true,
  "seeds": [1, 2, 3, 4, 5]
})";

Outcome n_sweep() {
  const fs::path dir = g_work / "n-sweep";
  const auto cfg = runner::parse_sweep_config(kSweep);
  runner::run_sweep(cfg, dir);
  std::map<std::string, std::vector<double>> best;
  std::vector<double> baseline;
  for (const auto& r : runner::expand_sweep(cfg)) {
    const auto res = json::parse(slurp(dir / r.variant / ("seed-" + std::to_string(r.seed)) / "result.json"));
    best[r.variant].push_back(res.at("best_avg_at_k").get<double>());
    if (r.variant == "full-opd") baseline.push_back(res.at("baseline").at("avg_at_k").get<double>());
  }
  const double base = mean(baseline), opd = mean(best["full-opd"]);
  bool band_ok = true;
  double best_esr = -1;
  std::string cells;
  for (std::size_t n : cfg.cutoffs) {
    const double m = mean(best["n" + std::to_string(n)]);
    band_ok = band_ok && m >= base + 0.05;
    best_esr = std::max(best_esr, m);
    cells += fmt("N=%zu %.3f, ", n, m);
  }
  return {band_ok && best_esr >= opd - 0.02,
          fmt("best avg@4 (mean of 5 seeds): %sfull-OPD %.3f, undistilled %.3f", cells.c_str(), opd, base)};
}

Outcome generation_cost() {
  auto make = [](std::string strategy) {
    return runner::parse_config(runner::apply_overrides(
        R"({"seed": 3, "student": {"max_context": 600},
            "distill": {"cutoff": 32, "max_length": 512, "allow_eos": false, "steps": 3, "batch_size": 16,
                        "regime": "full-finetune", "optimizer": "adam", "learning_rate": 0.001}})",
        {"distill.strategy=\"" + strategy + "\""}));
  };
  double tokens[2] = {0, 0}, gen_s[2] = {0, 0};
  const char* strategies[2] = {"position-esr", "full-opd"};
  for (int i = 0; i < 2; ++i) {
    runner::Experiment exp(make(strategies[i]));
    for (int s = 0; s < 3; ++s) {
      distill::PhaseTiming t;
      const auto m = exp.trainer().step(exp.train_suite(), &t);
      tokens[i] += static_cast<double>(m.generated_tokens);
      gen_s[i] += t.generate_s;
    }
  }
  const double token_ratio = tokens[0] / tokens[1], time_ratio = gen_s[0] / gen_s[1];
  const double bound = 32.0 / 512.0 * 1.1;
  return {token_ratio <= bound && time_ratio <= 0.25,
          fmt("generated tokens per step ESR %.0f vs OPD %.0f (ratio %.4f, bound %.4f); generate time ratio %.3f "
              "(%.2fs vs %.2fs)",
              tokens[0] / 3, tokens[1] / 3, token_ratio, bound, time_ratio, gen_s[0] / 3, gen_s[1] / 3)};
}

Outcome commitment_partition() {
  std::vector<json> reports;
  // Probe reports of every run under the work directory.
  if (fs::exists(g_work)) {
    for (const auto& e : fs::recursive_directory_iterator(g_work)) {
      if (e.path().parent_path().filename() == "probes" && e.path().extension() == ".json") {
        const auto j = json::parse(slurp(e.path()));
        if (j.contains("commitment") && !j["commitment"].contains("unavailable")) reports.push_back(j["commitment"]);
      }
    }
  }
  // Plus fresh measurements over untrained students against Markov and scripted teachers.
  const auto chars = tok::Tokenizer::default_char();
  const auto merge = tok::Tokenizer::default_merge();
  const auto suite = tasks::generate_suite(tasks::TaskKind::Addition, {2, 4}, 40, 6);
  std::vector<std::string> prompts;
  for (const auto& t : suite) prompts.push_back(t.prompt);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto& tk = seed % 2 ? merge : chars;
    lm::StudentModel student(student_config(tk, seed, 128));
    lm::StudentPolicy policy(student, tk);
    probes::SampleOptions so;
    so.max_length = 32;
    so.seed = seed;
    std::unique_ptr<lm::LanguageModel> teacher;
    if (seed % 2) teacher = std::make_unique<lm::ScriptedTaskTeacher>(merge, 0.05);
    else teacher = std::make_unique<lm::MarkovTeacher>(lm::MarkovTeacher::random_stationary(chars, seed, 0.2, 0.05, true));
    const auto rollouts = probes::sample_scored(policy, *teacher, prompts, so);
    for (double f : {0.05, 0.1, 0.5, 1.0}) {
      const auto c = probes::mode_commitment(rollouts, f);
      reports.push_back({{"top1_pct", c.top1_pct},
                         {"top2to5_pct", c.top2to5_pct},
                         {"outside_top5_pct", c.outside_top5_pct},
                         {"mean_top1_prob", c.mean_top1_prob}});
    }
  }
  double worst_sum = 0;
  bool prob_ok = true;
  for (const auto& r : reports) {
    const double total = r["top1_pct"].get<double>() + r["top2to5_pct"].get<double>() +
                         r["outside_top5_pct"].get<double>();
    worst_sum = std::max(worst_sum, std::abs(total - 100.0));
    const double p = r["mean_top1_prob"].get<double>();
    prob_ok = prob_ok && p >= 0 && p <= 1;
  }
  // Full agreement: the student argmax is always the teacher's top token.
  distill::ScoredRollout agree;
  for (std::size_t i = 0; i < 200; ++i) {
    distill::PerTokenStats s;
    s.position = i;
    s.aligned = true;
    s.kl = 0.01 * static_cast<double>(i % 7);
    s.argmax_teacher_rank = 1;
    s.student_top1 = 0.9;
    agree.stats.push_back(s);
  }
  const auto c = probes::mode_commitment({agree}, 0.1);
  const bool synthetic = c.top1_pct == 100 && c.top2to5_pct == 0 && c.outside_top5_pct == 0;
  return {worst_sum <= 1e-9 && prob_ok && synthetic,
          fmt("%zu commitment reports, max |sum - 100| = %.1e, top-1 prob in [0,1]: %s, agreement case (%.0f, %.0f, "
              "%.0f)",
              reports.size(), worst_sum, prob_ok ? "yes" : "no", c.top1_pct, c.top2to5_pct, c.outside_top5_pct)};
}

Outcome determinism_and_resume() {
  const auto cfg = runner::parse_config(R"({
    "seed": 12,
    "task": {"train_problems": 200, "eval_problems": 20},
    "distill": {"steps": 8, "checkpoint_interval": 2, "batch_size": 8, "cutoff": 16, "max_length": 64,
                "regime": "adapter", "optimizer": "adam", "learning_rate": 0.001},
    "probes": {"at": [0, 4, 8], "prompts": 16, "max_length": 32}
  })");
  const fs::path a = g_work / "det" / "a", b = g_work / "det" / "b", c = g_work / "det" / "c";
  for (const auto& p : {a, b, c}) fs::remove_all(p);
  runner::run_experiment(cfg, a);
  runner::run_experiment(cfg, b);
  bool identical = true;
  for (const char* f : {"metrics.jsonl", "evals.jsonl", "probes/step-000004.json", "probes/step-000008.json"}) {
    identical = identical && slurp(a / f) == slurp(b / f);
  }
  for (std::uint64_t s : {2, 4, 6, 8}) {
    identical = identical && slurp(distill::checkpoint_path(a, s)) == slurp(distill::checkpoint_path(b, s));
  }
  // Interrupt at the step-4 checkpoint: later artifacts are lost, a partial record remains.
  fs::create_directories(c);
  fs::copy(a, c, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  fs::remove(c / "result.json");
  for (std::uint64_t s : {6, 8}) fs::remove(distill::checkpoint_path(c, s));
  fs::remove(c / "probes" / "step-000008.json");
  {
    auto lines = jsonl(c / "metrics.jsonl");
    std::ofstream out(c / "metrics.jsonl", std::ios::trunc);
    for (std::size_t i = 0; i < 5; ++i) out << lines[i].dump() << "\n";
  }
  runner::run_experiment(cfg, c, true);
  bool resumed = slurp(a / "metrics.jsonl") == slurp(c / "metrics.jsonl") &&
                 slurp(a / "evals.jsonl") == slurp(c / "evals.jsonl") &&
                 slurp(a / "probes" / "step-000008.json") == slurp(c / "probes" / "step-000008.json");
  for (std::uint64_t s : {6, 8}) {
    resumed = resumed && slurp(distill::checkpoint_path(a, s)) == slurp(distill::checkpoint_path(c, s));
  }
  return {identical && resumed, fmt("repeat run byte-identical: %s; resume from step 4 matches: %s",
                                    identical ? "yes" : "no", resumed ? "yes" : "no")};
}

Outcome evaluator_laws() {
  std::vector<tasks::EvalReport> reports;
  if (fs::exists(g_work)) {
    for (const auto& e : fs::recursive_directory_iterator(g_work)) {
      const auto name = e.path().filename().string();
      if (name == "evals.jsonl") {
        for (const auto& r : jsonl(e.path())) reports.push_back(runner::parse_eval_json(r.dump()));
      } else if (e.path().parent_path().filename() == "evals" && e.path().extension() == ".json") {
        reports.push_back(runner::parse_eval_json(slurp(e.path())));
      }
    }
  }
  const auto merge = tok::Tokenizer::default_merge();
  for (auto kind : {tasks::TaskKind::Addition, tasks::TaskKind::DigitSort, tasks::TaskKind::BracketBalance}) {
    const auto suite = tasks::generate_suite(kind, {2, 4}, 30, 3);
    const lm::ScriptedTaskTeacher teacher(merge, 0.3);
    lm::StudentModel student(student_config(merge, 1, 128));
    lm::StudentPolicy policy(student, merge);
    for (double temp : {0.0, 0.7, 1.5}) {
      tasks::EvalOptions o;
      o.temperature = temp;
      o.max_tokens = 32;
      reports.push_back(tasks::evaluate(teacher, suite, o));
      reports.push_back(tasks::evaluate(policy, suite, o));
    }
  }
  std::size_t violations = 0;
  for (const auto& r : reports) violations += r.avg_at_k > r.pass_at_k;

  // Verifier totality on fuzzed responses.
  std::mt19937_64 rng(8);
  const std::string pieces[] = {"answer:", "answer: ", "yes", "no", "1", "23", "-", " ", "\n", "answer:answer:",
                                "(", ")", "x", "\xff", "00", "+"};
  std::size_t threw = 0;
  const auto suite = tasks::generate_suite(tasks::TaskKind::Addition, {2, 4}, 50, 9);
  for (int i = 0; i < 100000; ++i) {
    std::string s;
    const std::size_t n = rng() % 8;
    for (std::size_t j = 0; j < n; ++j) s += pieces[rng() % std::size(pieces)];
    try {
      (void)tasks::verify_response(suite[static_cast<std::size_t>(i) % suite.size()], s);
    } catch (...) {
      ++threw;
    }
  }

  // Two of four samples correct.
  const auto one = tasks::generate_suite(tasks::TaskKind::Addition, {1, 4}, 1, 1);
  std::vector<std::vector<tasks::SampleOutcome>> samples(1);
  samples[0] = {{one[0].gold, true, 3}, {"x", false, 3}, {one[0].gold, true, 3}, {std::nullopt, false, 3}};
  const auto two = tasks::aggregate(one, samples, 0.7);
  const bool exact = two.avg_at_k == 0.5 && two.pass_at_k == 1.0;
  return {violations == 0 && threw == 0 && exact,
          fmt("%zu reports with avg@k > pass@k: %zu; verifier threw on %zu of 100000 fuzzed responses; two-of-four "
              "case avg %.2f pass %.2f",
              reports.size(), violations, threw, two.avg_at_k, two.pass_at_k)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_correctness},
      {"KL properties", kl_properties},
      {"window loss degenerates to full OPD", window_degeneracy},
      {"EOS semantics", eos_semantics},
      {"alignment oracle", alignment_oracle},
      {"selection oracle", selection_oracle},
      {"cascading alignment", cascading_alignment},
      {"teacher decay", teacher_decay},
      {"N-sweep shape", n_sweep},
      {"generation cost", generation_cost},
      {"commitment partition", commitment_partition},
      {"determinism and resume", determinism_and_resume},
      {"evaluator laws", evaluator_laws},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a.rfind("--work=", 0) == 0) {
      g_work = a.substr(7);
    } else {
      only.insert(std::stoul(a));
    }
  }
  const bool keep = !g_work.empty();
  if (g_work.empty()) g_work = fs::temp_directory_path() / ("esr_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s [%zu] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str(),
                since(t0));
    std::fflush(stdout);
  }
  if (!keep) fs::remove_all(g_work);
  return failures == 0 ? 0 : 1;
}
