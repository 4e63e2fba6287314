#include "esr/lm/student.hpp"

#include "esr/errors.hpp"
#include "esr/grad/numerics.hpp"

#include <cmath>

namespace esr::lm {

using grad::Graph;
using grad::Parameter;
using grad::Var;

const char* to_string(Regime r) { return r == Regime::Adapter ? "adapter" : "full-finetune"; }

Regime parse_regime(std::string_view name) {
  if (name == "adapter") return Regime::Adapter;
  if (name == "full-finetune") return Regime::FullFinetune;
  throw ConfigError("regime must be 'adapter' or 'full-finetune', got '" + std::string(name) + "'");
}

namespace {

std::string layer_name(int layer, const char* leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

constexpr const char* kProjections[] = {"attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"};

constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

void layer_norm_row(Eigen::Ref<grad::Matrix> x, const grad::Matrix& gain, const grad::Matrix& bias,
                    grad::Matrix& out) {
  const double mu = x.row(0).mean();
  const double var = (x.row(0).array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  out = ((x.row(0).array() - mu) * inv) * gain.row(0).array();
  out.row(0) += bias.row(0);
}

}  // namespace

std::vector<std::string> default_adapter_targets(const StudentConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.layers; ++l) {
    for (const char* p : kProjections) out.push_back(layer_name(l, p));
  }
  return out;
}

StudentModel::StudentModel(const StudentConfig& cfg) : cfg_(cfg) {
  if (cfg.layers < 1 || cfg.heads < 1 || cfg.width < 1 || cfg.vocab < 1 || cfg.max_context < 1 ||
      cfg.mlp_multiplier < 1) {
    throw ConfigError("student: layers, heads, width, vocab, max_context, mlp_multiplier must be >= 1");
  }
  if (cfg.width % cfg.heads != 0) throw ConfigError("student: width must be divisible by heads");
  const int d = cfg.width, v = cfg.vocab, h = cfg.width * cfg.mlp_multiplier;
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(derive_seed(cfg.seed, {0x57ULL}));
  auto add = [&](const std::string& name, grad::Matrix m) {
    Parameter p;
    p.value = std::move(m);
    p.zero_grad();
    params_.emplace(name, std::move(p));
  };
  auto ones = [](int c) { return grad::Matrix::Ones(1, c); };
  auto zeros = [](int c) { return grad::Matrix::Zero(1, c); };

  add("embed.tok", grad::gaussian(v, d, std, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    add(layer_name(l, "ln1.gain"), ones(d));
    add(layer_name(l, "ln1.bias"), zeros(d));
    for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      add(layer_name(l, p), grad::gaussian(d, d, std, rng));
    }
    add(layer_name(l, "ln2.gain"), ones(d));
    add(layer_name(l, "ln2.bias"), zeros(d));
    add(layer_name(l, "mlp.fc1"), grad::gaussian(d, h, std, rng));
    add(layer_name(l, "mlp.fc1_bias"), zeros(h));
    add(layer_name(l, "mlp.fc2"), grad::gaussian(h, d, 1.0 / std::sqrt(static_cast<double>(h)), rng));
    add(layer_name(l, "mlp.fc2_bias"), zeros(d));
  }
  add("final_ln.gain", ones(d));
  add("final_ln.bias", zeros(d));
  add("unembed", grad::gaussian(d, v, std, rng));

  positions_.resize(cfg.max_context, d);
  for (int p = 0; p < cfg.max_context; ++p) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      positions_(p, i) = std * std::sin(p * freq);
      if (i + 1 < d) positions_(p, i + 1) = std * std::cos(p * freq);
    }
  }
}

void StudentModel::set_regime(Regime regime) {
  if (regime == Regime::Adapter && !adapters_) {
    throw ConfigError("adapter regime requires adapters to be attached");
  }
  for (auto& [_, p] : params_) p.trainable = regime == Regime::FullFinetune;
  if (adapters_) {
    for (auto& [_, p] : adapters_->params) p.trainable = regime == Regime::Adapter;
  }
}

std::vector<std::pair<std::string, Parameter*>> StudentModel::named_trainable() {
  std::vector<std::pair<std::string, Parameter*>> out;
  for (auto& [name, p] : params_) {
    if (p.trainable) out.emplace_back(name, &p);
  }
  if (adapters_) {
    for (auto& [name, p] : adapters_->params) {
      if (p.trainable) out.emplace_back(name, &p);
    }
  }
  return out;
}

std::vector<Parameter*> StudentModel::trainable() {
  std::vector<Parameter*> out;
  for (auto& [_, p] : named_trainable()) out.push_back(p);
  return out;
}

void StudentModel::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw ShapeError("student forward: empty input");
  if (static_cast<int>(tokens.size()) > cfg_.max_context) {
    throw ContextError("student forward: length " + std::to_string(tokens.size()) +
                       " exceeds max context " + std::to_string(cfg_.max_context));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= cfg_.vocab) throw VocabError("student forward: token id " + std::to_string(t));
  }
}

template <typename Leaf>
Var StudentModel::build(Graph& g, std::span<const TokenId> tokens, Leaf leaf) const {
  check_tokens(tokens);
  const Eigen::Index L = static_cast<Eigen::Index>(tokens.size());
  const int d = cfg_.width, dh = d / cfg_.heads;
  const double adapter_scale = adapters_ ? adapters_->scale() : 0.0;

  auto project = [&](Var x, const std::string& name) {
    Var y = matmul(x, leaf(name));
    if (adapters_ && adapters_->params.count(name + ".down")) {
      Var low = matmul(matmul(x, leaf(name + ".down")), leaf(name + ".up"));
      y = y + scale(low, adapter_scale);
    }
    return y;
  };

  grad::Matrix mask = grad::Matrix::Zero(L, L);
  for (Eigen::Index i = 0; i < L; ++i) {
    for (Eigen::Index j = i + 1; j < L; ++j) mask(i, j) = -1e9;
  }
  Var causal = g.constant(std::move(mask));

  Var x = gather_rows(leaf("embed.tok"), tokens) + g.constant(positions_.topRows(L));
  for (int l = 0; l < cfg_.layers; ++l) {
    Var h = layer_norm(x, leaf(layer_name(l, "ln1.gain")), leaf(layer_name(l, "ln1.bias")));
    Var q = project(h, layer_name(l, "attn.q"));
    Var k = project(h, layer_name(l, "attn.k"));
    Var v = project(h, layer_name(l, "attn.v"));
    std::vector<Var> heads;
    for (int hd = 0; hd < cfg_.heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, dh), kh = slice_cols(k, hd * dh, dh), vh = slice_cols(v, hd * dh, dh);
      Var scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh))) + causal;
      heads.push_back(matmul(softmax(scores), vh));
    }
    Var attn = heads.size() == 1 ? heads[0] : concat_cols(heads);
    x = x + project(attn, layer_name(l, "attn.o"));
    Var m = layer_norm(x, leaf(layer_name(l, "ln2.gain")), leaf(layer_name(l, "ln2.bias")));
    m = gelu(add_row(project(m, layer_name(l, "mlp.fc1")), leaf(layer_name(l, "mlp.fc1_bias"))));
    m = add_row(project(m, layer_name(l, "mlp.fc2")), leaf(layer_name(l, "mlp.fc2_bias")));
    x = x + m;
  }
  x = layer_norm(x, leaf("final_ln.gain"), leaf("final_ln.bias"));
  return matmul(x, leaf("unembed"));
}

Var StudentModel::forward(Graph& g, std::span<const TokenId> tokens) {
  return build(g, tokens, [&](const std::string& name) {
    auto it = params_.find(name);
    if (it != params_.end()) return g.parameter(it->second);
    return g.parameter(adapters_->params.at(name));
  });
}

grad::Matrix StudentModel::logits(std::span<const TokenId> tokens) const {
  Graph g;
  Var out = build(g, tokens, [&](const std::string& name) {
    auto it = params_.find(name);
    if (it != params_.end()) return g.constant(it->second.value);
    return g.constant(adapters_->params.at(name).value);
  });
  return out.value();
}

grad::Matrix StudentModel::effective_weight(const std::string& name) const {
  grad::Matrix w = params_.at(name).value;
  if (adapters_ && adapters_->params.count(name + ".down")) {
    w += adapters_->scale() * (adapters_->params.at(name + ".down").value * adapters_->params.at(name + ".up").value);
  }
  return w;
}

StudentModel::Decoder::Decoder(const StudentModel& model) : model_(&model) {
  const auto& cfg = model.cfg_;
  for (int l = 0; l < cfg.layers; ++l) {
    for (const char* p : kProjections) weights_.push_back(model.effective_weight(layer_name(l, p)));
    keys_.emplace_back(cfg.max_context, cfg.width);
    values_.emplace_back(cfg.max_context, cfg.width);
  }
}

const Vector& StudentModel::Decoder::push(TokenId id) {
  const auto& cfg = model_->cfg_;
  const auto& P = model_->params_;
  if (id < 0 || id >= cfg.vocab) throw VocabError("student decode: token id " + std::to_string(id));
  if (static_cast<int>(length_) >= cfg.max_context) {
    throw ContextError("student decode: exceeds max context " + std::to_string(cfg.max_context));
  }
  const int d = cfg.width, dh = d / cfg.heads;
  const Eigen::Index t = static_cast<Eigen::Index>(length_);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  grad::Matrix x = P.at("embed.tok").value.row(id) + model_->positions_.row(t);
  grad::Matrix h;
  for (int l = 0; l < cfg.layers; ++l) {
    const grad::Matrix* w = &weights_[static_cast<std::size_t>(l) * 6];
    layer_norm_row(x, P.at(layer_name(l, "ln1.gain")).value, P.at(layer_name(l, "ln1.bias")).value, h);
    grad::Matrix q = h * w[0];
    keys_[l].row(t) = h * w[1];
    values_[l].row(t) = h * w[2];
    grad::Matrix attn(1, d);
    for (int hd = 0; hd < cfg.heads; ++hd) {
      auto K = keys_[l].block(0, hd * dh, t + 1, dh);
      auto V = values_[l].block(0, hd * dh, t + 1, dh);
      grad::Matrix scores = (q.middleCols(hd * dh, dh) * K.transpose()) * inv_sqrt;
      const double mx = scores.maxCoeff();
      grad::Matrix p = (scores.array() - mx).exp();
      p /= p.sum();
      attn.middleCols(hd * dh, dh) = p * V;
    }
    x += attn * w[3];
    layer_norm_row(x, P.at(layer_name(l, "ln2.gain")).value, P.at(layer_name(l, "ln2.bias")).value, h);
    grad::Matrix m = h * w[4];
    m.row(0) += P.at(layer_name(l, "mlp.fc1_bias")).value.row(0);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      m.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    grad::Matrix o = m * w[5];
    o.row(0) += P.at(layer_name(l, "mlp.fc2_bias")).value.row(0);
    x += o;
  }
  layer_norm_row(x, P.at("final_ln.gain").value, P.at("final_ln.bias").value, h);
  logits_ = (h * P.at("unembed").value).transpose();
  ++length_;
  return logits_;
}

AdapterSet make_adapters(const StudentModel& model, int rank, double alpha,
                         std::vector<std::string> targets, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("adapter rank must be >= 1");
  AdapterSet set;
  set.rank = rank;
  set.alpha = alpha;
  set.targets = std::move(targets);
  Rng rng(derive_seed(seed, {0xada9ULL}));
  for (const std::string& t : set.targets) {
    auto it = model.parameters().find(t);
    if (it == model.parameters().end()) throw ShapeError("adapter target '" + t + "' does not exist");
    const auto& w = it->second.value;
    Parameter down, up;
    down.value = grad::gaussian(w.rows(), rank, 1.0 / std::sqrt(static_cast<double>(w.rows())), rng);
    up.value = grad::Matrix::Zero(rank, w.cols());
    down.zero_grad();
    up.zero_grad();
    set.params.emplace(t + ".down", std::move(down));
    set.params.emplace(t + ".up", std::move(up));
  }
  return set;
}

StudentModel apply_adapters(const StudentModel& model, AdapterSet adapters) {
  if (adapters.rank < 1) throw ConfigError("adapter rank must be >= 1");
  for (const std::string& t : adapters.targets) {
    auto it = model.parameters().find(t);
    if (it == model.parameters().end()) throw ShapeError("adapter target '" + t + "' does not exist");
    auto down = adapters.params.find(t + ".down");
    auto up = adapters.params.find(t + ".up");
    if (down == adapters.params.end() || up == adapters.params.end()) {
      throw ShapeError("adapter factors missing for '" + t + "'");
    }
    const auto& w = it->second.value;
    if (down->second.value.rows() != w.rows() || down->second.value.cols() != adapters.rank ||
        up->second.value.rows() != adapters.rank || up->second.value.cols() != w.cols()) {
      throw ShapeError("adapter factor shapes do not match '" + t + "'");
    }
  }
  if (adapters.params.size() != 2 * adapters.targets.size()) {
    throw ShapeError("adapter set holds factors for undeclared targets");
  }
  StudentModel out = model;
  out.adapters() = std::move(adapters);
  return out;
}

namespace {

class StudentSession : public DecodeSession {
 public:
  explicit StudentSession(const StudentModel& model) : decoder_(model) {}
  TokenScores next() override { return TokenScores::logits(decoder_.logits()); }
  void push(TokenId id) override { decoder_.push(id); }

 private:
  StudentModel::Decoder decoder_;
};

}  // namespace

StudentPolicy::StudentPolicy(const StudentModel& model, const tok::Tokenizer& tokenizer)
    : model_(&model), tokenizer_(&tokenizer) {
  if (static_cast<int>(tokenizer.vocab_size()) != model.config().vocab) {
    throw ConfigError("student vocab size does not match its tokenizer");
  }
}

std::unique_ptr<DecodeSession> StudentPolicy::start(std::span<const TokenId> prompt) const {
  if (static_cast<int>(prompt.size()) + 1 > model_->config().max_context) {
    throw ContextError("prompt exceeds student context");
  }
  auto s = std::make_unique<StudentSession>(*model_);
  s->push(tok::Tokenizer::kBos);
  for (TokenId t : prompt) s->push(t);
  return s;
}

}  // namespace esr::lm
