#include "esr/tasks/eval.hpp"

#include "esr/errors.hpp"

#include <map>

namespace esr::tasks {

EvalReport aggregate(const std::vector<Task>& tasks, const std::vector<std::vector<SampleOutcome>>& samples,
                     double temperature) {
  if (tasks.size() != samples.size()) throw ShapeError("aggregate: one sample list per task required");
  EvalReport r;
  r.temperature = temperature;
  r.problems = tasks.size();
  if (tasks.empty()) return r;
  r.k = static_cast<int>(samples.front().size());
  double correct = 0, passed = 0, majority = 0, length = 0, total = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (static_cast<int>(samples[i].size()) != r.k || r.k < 1) throw ShapeError("aggregate: ragged samples");
    bool any = false;
    std::map<std::string, int> votes;
    for (const SampleOutcome& s : samples[i]) {
      correct += s.correct;
      any = any || s.correct;
      length += static_cast<double>(s.length);
      total += 1;
      if (s.answer && !s.answer->empty()) ++votes[*s.answer];
    }
    passed += any;
    int best = 0, best_count = 0;
    const std::string* mode = nullptr;
    for (const auto& [answer, n] : votes) {
      if (n > best) {
        best = n;
        best_count = 1;
        mode = &answer;
      } else if (n == best) {
        ++best_count;
      }
    }
    majority += mode != nullptr && best_count == 1 && *mode == tasks[i].gold;
  }
  r.avg_at_k = correct / total;
  r.pass_at_k = passed / static_cast<double>(tasks.size());
  r.maj_at_k = majority / static_cast<double>(tasks.size());
  r.mean_length = length / total;
  return r;
}

EvalReport evaluate(const lm::LanguageModel& model, const std::vector<Task>& tasks, const EvalOptions& options) {
  if (options.k < 1) throw ConfigError("evaluate: k must be >= 1");
  lm::GenerationOptions gen;
  gen.max_tokens = options.max_tokens;
  gen.temperature = options.temperature;
  gen.record_scores = false;
  const auto& tok = model.tokenizer();
  std::vector<std::vector<SampleOutcome>> samples(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto prompt = tok.encode(tasks[i].prompt);
    for (int j = 0; j < options.k; ++j) {
      Rng rng(derive_seed(options.seed, {i, static_cast<std::uint64_t>(j)}));
      const auto g = lm::generate(model, prompt, gen, rng);
      const std::string text = tok.decode(g.tokens);
      samples[i].push_back({extract_answer(text), verify_response(tasks[i], text), g.tokens.size()});
    }
  }
  return aggregate(tasks, samples, options.temperature);
}

}  // namespace esr::tasks
