#include "esr/distill/rollout.hpp"

#include "esr/errors.hpp"
#include "esr/grad/numerics.hpp"

#include <cmath>

namespace esr::distill {

Rollout generate_rollout(const lm::LanguageModel& student, std::span<const TokenId> prompt,
                         const RolloutOptions& options, Rng& rng) {
  if (options.max_tokens < 1) throw ConfigError("rollout: max tokens must be >= 1");
  lm::GenerationOptions gen;
  gen.max_tokens = options.max_tokens;
  gen.temperature = options.temperature;
  gen.allow_eos = options.allow_eos;
  gen.limit_reason = options.limit_reason;
  gen.record_scores = true;
  lm::Generation g = lm::generate(student, prompt, gen, rng);
  Rollout r;
  r.prompt.assign(prompt.begin(), prompt.end());
  r.response = std::move(g.tokens);
  r.stop = g.stop;
  r.student_logp.reserve(g.scores.size());
  for (const auto& s : g.scores) {
    if (s.kind == lm::TokenScores::Kind::Logits) {
      r.student_logp.push_back(grad::log_softmax(s.values));
    } else {
      Vector lp(s.values.size());
      for (Eigen::Index i = 0; i < lp.size(); ++i) {
        lp(i) = s.values(i) > 0 ? std::log(s.values(i)) : -std::numeric_limits<double>::infinity();
      }
      r.student_logp.push_back(std::move(lp));
    }
  }
  return r;
}

VocabBridge VocabBridge::build(const tok::Tokenizer& student, const tok::Tokenizer& teacher) {
  VocabBridge b;
  b.teacher_vocab = teacher.vocab_size();
  b.identity = student == teacher;
  b.to_teacher.assign(student.vocab_size(), -1);
  for (TokenId id = 0; id < static_cast<TokenId>(student.vocab_size()); ++id) {
    if (student.is_control(id)) {
      b.to_teacher[static_cast<std::size_t>(id)] = id;
    } else if (auto t = teacher.find(student.text(id))) {
      b.to_teacher[static_cast<std::size_t>(id)] = *t;
    }
  }
  return b;
}

Vector VocabBridge::project_logq(const Vector& teacher_probs, double floor) const {
  Vector out(static_cast<Eigen::Index>(to_teacher.size()));
  for (std::size_t v = 0; v < to_teacher.size(); ++v) {
    const int t = to_teacher[v];
    out(static_cast<Eigen::Index>(v)) = std::log(std::max(t < 0 ? 0.0 : teacher_probs(t), floor));
  }
  return out;
}

double reverse_kl(const Vector& student_logp, const Vector& teacher_probs, double floor, bool* floored) {
  if (student_logp.size() != teacher_probs.size()) throw ShapeError("reverse_kl: vocabulary sizes differ");
  double kl = 0;
  bool used_floor = false;
  for (Eigen::Index v = 0; v < student_logp.size(); ++v) {
    const double lp = student_logp(v);
    if (!std::isfinite(lp)) continue;
    const double p = std::exp(lp);
    if (p == 0) continue;
    const double q = teacher_probs(v);
    if (q < floor) used_floor = true;
    kl += p * (lp - std::log(std::max(q, floor)));
  }
  if (floored) *floored = used_floor;
  return std::max(kl, 0.0);
}

std::vector<bool> ScoredRollout::aligned_mask() const {
  std::vector<bool> mask(rollout.length(), false);
  for (const auto& s : stats) mask[s.position] = s.aligned;
  return mask;
}

namespace {

std::size_t rank_of(const Vector& probs, int id) {
  if (id < 0) return static_cast<std::size_t>(probs.size()) + 1;
  const double p = probs(id);
  std::size_t above = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) above += probs(i) > p;
  return above + 1;
}

}  // namespace

ScoredRollout score_rollout(Rollout rollout, const tok::Tokenizer& student_tok, const lm::LanguageModel& teacher,
                            const VocabBridge& bridge, double floor) {
  ScoredRollout out;
  const auto& teacher_tok = teacher.tokenizer();
  const std::size_t T = rollout.length();
  const bool ends_eos = T > 0 && rollout.response.back() == tok::Tokenizer::kEos;

  std::vector<TokenId> teacher_prompt, teacher_response;
  std::vector<tok::TokenSpan> teacher_spans;
  if (bridge.identity) {
    teacher_prompt = rollout.prompt;
    teacher_response = rollout.response;
    if (ends_eos) teacher_response.pop_back();
    teacher_spans = student_tok.spans_of(teacher_response);
  } else {
    teacher_prompt = teacher_tok.encode(student_tok.decode(rollout.prompt));
    auto enc = teacher_tok.encode_with_spans(student_tok.decode(rollout.response));
    teacher_response = std::move(enc.ids);
    teacher_spans = std::move(enc.spans);
  }
  const auto student_spans = student_tok.spans_of(rollout.response);
  out.alignment = xtok::align_tokenizations(student_spans, teacher_spans);
  if (ends_eos) {
    out.alignment.pairs.emplace_back(T - 1, teacher_response.size());
    teacher_response.push_back(tok::Tokenizer::kEos);
  }
  out.alignment.student_tokens = T;
  out.alignment.coverage = T == 0 ? 1.0 : static_cast<double>(out.alignment.pairs.size()) / static_cast<double>(T);
  out.teacher_tokens = teacher_response.size();

  // Teacher distributions at every aligned teacher index.
  std::vector<Vector> teacher_probs(teacher_response.size());
  std::vector<bool> needed(teacher_response.size(), false);
  std::size_t last_needed = 0;
  for (const auto& [s, t] : out.alignment.pairs) {
    needed[t] = true;
    last_needed = std::max(last_needed, t + 1);
  }
  if (!out.alignment.pairs.empty()) {
    auto session = teacher.start(teacher_prompt);
    for (std::size_t j = 0; j < last_needed; ++j) {
      if (needed[j]) teacher_probs[j] = session->next().probs();
      if (j + 1 < last_needed) session->push(teacher_response[j]);
    }
  }

  out.stats.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    out.stats[i].position = i;
    const Vector& lp = rollout.student_logp[i];
    out.stats[i].student_entropy = grad::entropy_from_logprobs(lp);
    Eigen::Index arg = 0;
    lp.maxCoeff(&arg);
    out.stats[i].student_top1 = std::exp(lp(arg));
  }
  for (const auto& [s, t] : out.alignment.pairs) {
    PerTokenStats& st = out.stats[s];
    const Vector& q = teacher_probs[t];
    st.aligned = true;
    st.teacher_entropy = grad::entropy(q);
    Vector logq = bridge.project_logq(q, floor);
    Vector q_student(logq.size());
    for (Eigen::Index v = 0; v < q_student.size(); ++v) {
      const int tv = bridge.to_teacher[static_cast<std::size_t>(v)];
      q_student(v) = tv < 0 ? 0.0 : q(tv);
    }
    st.kl = reverse_kl(rollout.student_logp[s], q_student, floor, &st.floored);
    st.teacher_rank = rank_of(q, bridge.to_teacher[static_cast<std::size_t>(rollout.response[s])]);
    Eigen::Index arg = 0;
    rollout.student_logp[s].maxCoeff(&arg);
    st.argmax_teacher_rank = rank_of(q, bridge.to_teacher[static_cast<std::size_t>(arg)]);
    out.teacher_logq.push_back(std::move(logq));
  }
  out.rollout = std::move(rollout);
  return out;
}

}  // namespace esr::distill
