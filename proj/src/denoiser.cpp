#include "cdd/denoiser.hpp"

#include <cmath>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

namespace {

constexpr double kInitStd = 0.02;

Tensor normal_tensor(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

std::size_t usize(int v) { return static_cast<std::size_t>(v); }

}  // namespace

std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::q: return "q";
    case LoraTarget::k: return "k";
    case LoraTarget::v: return "v";
    case LoraTarget::p: return "p";
  }
  return "?";
}

LoraTarget parse_lora_target(const std::string& s) {
  if (s == "q" || s == "W_q") return LoraTarget::q;
  if (s == "k" || s == "W_k") return LoraTarget::k;
  if (s == "v" || s == "W_v") return LoraTarget::v;
  if (s == "p" || s == "W_p") return LoraTarget::p;
  throw ConfigError("unknown LoRA target '" + s + "' (expected q, k, v or p)");
}

std::vector<LoraTarget> parse_lora_targets(const std::string& s) {
  std::vector<LoraTarget> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(parse_lora_target(item));
  }
  return out;
}

std::string to_string(const std::vector<LoraTarget>& targets) {
  std::string s;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (i) s += ',';
    s += to_string(targets[i]);
  }
  return s;
}

void LoraConfig::validate(int d_model) const {
  if (r < 1) throw ConfigError("lora: r must be >= 1");
  if (2 * r > d_model) throw ConfigError("lora: r must be <= d_model / 2");
  if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be positive");
  if (targets.empty()) throw ConfigError("lora: targets must be non-empty");
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = i + 1; j < targets.size(); ++j)
      if (targets[i] == targets[j]) throw ConfigError("lora: duplicate target");
}

void DenoiserConfig::validate() const {
  if (K < 2 || T < 1 || D < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 ||
      d_cond < 1 || n_conditions < 1 || d_ff < 0) {
    throw ConfigError("model: all dimensions must be positive");
  }
  if (d_model % n_heads) {
    throw ConfigError("model: d_model must be divisible by n_heads");
  }
}

std::string DenoiserConfig::canonical() const {
  std::ostringstream os;
  os << "K=" << K << ";T=" << T << ";D=" << D << ";d_model=" << d_model
     << ";n_layers=" << n_layers << ";n_heads=" << n_heads
     << ";d_cond=" << d_cond << ";n_conditions=" << n_conditions
     << ";d_ff=" << ff_width();
  return os.str();
}

Denoiser::Denoiser(const DenoiserConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = usize(cfg_.d_model), dc = usize(cfg_.d_cond);
  const std::size_t ff = usize(cfg_.ff_width());
  tok_emb_ = param(normal_tensor({usize(cfg_.K) + 1, d}, rng, kInitStd));
  time_emb_ = param(normal_tensor({usize(cfg_.T) + 1, d}, rng, kInitStd));
  cond_emb_ = param(normal_tensor({usize(cfg_.n_conditions) + 1, dc}, rng, kInitStd));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    Block b;
    b.ln1_g = param(Tensor::filled({d}, 1.0));
    b.ln1_b = param(Tensor::zeros({d}));
    for (AdaptedLinear* al : {&b.wq, &b.wk, &b.wv, &b.wp}) {
      al->w0 = param(normal_tensor({d, d}, rng, kInitStd));
    }
    b.ln2_g = param(Tensor::filled({d}, 1.0));
    b.ln2_b = param(Tensor::zeros({d}));
    b.cq = param(normal_tensor({d, d}, rng, kInitStd));
    b.ck = param(normal_tensor({d, dc}, rng, kInitStd));
    b.cv = param(normal_tensor({d, dc}, rng, kInitStd));
    b.cp = param(normal_tensor({d, d}, rng, kInitStd));
    b.ln3_g = param(Tensor::filled({d}, 1.0));
    b.ln3_b = param(Tensor::zeros({d}));
    b.w1 = param(normal_tensor({ff, d}, rng, kInitStd));
    b.b1 = param(Tensor::zeros({ff}));
    b.w2 = param(normal_tensor({d, ff}, rng, kInitStd));
    b.b2 = param(Tensor::zeros({d}));
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = param(Tensor::filled({d}, 1.0));
  lnf_b_ = param(Tensor::zeros({d}));
  w_out_ = param(normal_tensor({usize(cfg_.K), d}, rng, kInitStd));
  b_out_ = param(Tensor::zeros({usize(cfg_.K)}));

  pos_enc_.assign(usize(cfg_.D) * d, 0.0);
  for (std::size_t pos = 0; pos < usize(cfg_.D); ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double angle = static_cast<double>(pos) * freq;
      pos_enc_[pos * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
}

Denoiser::Denoiser(const Denoiser& other) { deep_copy_from(other); }

Denoiser& Denoiser::operator=(const Denoiser& other) {
  if (this != &other) deep_copy_from(other);
  return *this;
}

void Denoiser::deep_copy_from(const Denoiser& other) {
  cfg_ = other.cfg_;
  lora_ = other.lora_;
  tok_emb_ = other.tok_emb_.clone();
  time_emb_ = other.time_emb_.clone();
  cond_emb_ = other.cond_emb_.clone();
  blocks_ = other.blocks_;
  auto dup = [](Tensor& t) {
    if (t.defined()) t = t.clone();
  };
  for (Block& b : blocks_) {
    for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.cq, &b.ck,
                      &b.cv, &b.cp, &b.ln3_g, &b.ln3_b, &b.w1, &b.b1, &b.w2,
                      &b.b2}) {
      dup(*t);
    }
    for (AdaptedLinear* al : {&b.wq, &b.wk, &b.wv, &b.wp}) {
      dup(al->w0);
      dup(al->a);
      dup(al->b);
    }
  }
  lnf_g_ = other.lnf_g_.clone();
  lnf_b_ = other.lnf_b_.clone();
  w_out_ = other.w_out_.clone();
  b_out_ = other.b_out_.clone();
  pos_enc_ = other.pos_enc_;
}

void Denoiser::for_each_base(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("tok_emb", tok_emb_);
  fn("time_emb", time_emb_);
  fn("cond_emb", cond_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Block& b = blocks_[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "ln1.g", b.ln1_g);
    fn(p + "ln1.b", b.ln1_b);
    fn(p + "attn.q", b.wq.w0);
    fn(p + "attn.k", b.wk.w0);
    fn(p + "attn.v", b.wv.w0);
    fn(p + "attn.p", b.wp.w0);
    fn(p + "ln2.g", b.ln2_g);
    fn(p + "ln2.b", b.ln2_b);
    fn(p + "cross.q", b.cq);
    fn(p + "cross.k", b.ck);
    fn(p + "cross.v", b.cv);
    fn(p + "cross.p", b.cp);
    fn(p + "ln3.g", b.ln3_g);
    fn(p + "ln3.b", b.ln3_b);
    fn(p + "mlp.w1", b.w1);
    fn(p + "mlp.b1", b.b1);
    fn(p + "mlp.w2", b.w2);
    fn(p + "mlp.b2", b.b2);
  }
  fn("lnf.g", lnf_g_);
  fn("lnf.b", lnf_b_);
  fn("out.w", w_out_);
  fn("out.b", b_out_);
}

void Denoiser::for_each_base(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Denoiser*>(this)->for_each_base(
      [&fn](const std::string& n, Tensor& t) { fn(n, t); });
}

Denoiser::AdaptedLinear* Denoiser::target(Block& blk, LoraTarget t) {
  switch (t) {
    case LoraTarget::q: return &blk.wq;
    case LoraTarget::k: return &blk.wk;
    case LoraTarget::v: return &blk.wv;
    case LoraTarget::p: return &blk.wp;
  }
  return nullptr;
}

std::vector<NamedTensor> Denoiser::base_parameters() const {
  std::vector<NamedTensor> out;
  for_each_base([&out](const std::string& n, const Tensor& t) {
    out.push_back({n, t});
  });
  return out;
}

std::vector<NamedTensor> Denoiser::lora_parameters() const {
  std::vector<NamedTensor> out;
  if (!lora_) return out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    for (LoraTarget t : lora_->targets) {
      const AdaptedLinear* al = target(const_cast<Block&>(blocks_[l]), t);
      const std::string p =
          "blocks." + std::to_string(l) + ".attn." + to_string(t) + ".lora_";
      out.push_back({p + "a", al->a});
      out.push_back({p + "b", al->b});
    }
  }
  return out;
}

std::vector<NamedTensor> Denoiser::parameters() const {
  auto out = base_parameters();
  for (auto& nt : lora_parameters()) out.push_back(std::move(nt));
  return out;
}

std::vector<Tensor> Denoiser::trainable() const {
  std::vector<Tensor> out;
  for (const auto& nt : parameters())
    if (nt.tensor.requires_grad()) out.push_back(nt.tensor);
  return out;
}

std::size_t Denoiser::count_trainable() const {
  std::size_t n = 0;
  for (const Tensor& t : trainable()) n += t.numel();
  return n;
}

void Denoiser::set_base_trainable(bool on) {
  for_each_base([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
}

void Denoiser::assign(const std::string& name, std::span<const double> values) {
  for (auto& nt : parameters()) {
    if (nt.name != name) continue;
    if (nt.tensor.numel() != values.size()) {
      throw ConfigError("assign: tensor '" + name + "' expects " +
                        std::to_string(nt.tensor.numel()) + " values, got " +
                        std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), nt.tensor.data().begin());
    return;
  }
  throw ConfigError("assign: unknown tensor '" + name + "'");
}

void Denoiser::attach_lora(const LoraConfig& cfg, Rng& rng) {
  if (lora_) throw UsageError("attach_lora: adapters already attached");
  cfg.validate(cfg_.d_model);
  set_base_trainable(false);
  const std::size_t r = usize(cfg.r);
  for (Block& blk : blocks_) {
    for (LoraTarget t : cfg.targets) {
      AdaptedLinear* al = target(blk, t);
      const std::size_t d_out = al->w0.dim(0), d_in = al->w0.dim(1);
      al->a = param(normal_tensor({r, d_in}, rng, kInitStd));
      al->b = param(Tensor::zeros({d_out, r}));
      al->scale = cfg.scale();
    }
  }
  lora_ = cfg;
}

void Denoiser::merge_lora() {
  if (!lora_) throw UsageError("merge_lora: no adapters attached");
  for (Block& blk : blocks_) {
    for (LoraTarget t : lora_->targets) {
      AdaptedLinear* al = target(blk, t);
      const std::size_t d_out = al->w0.dim(0), d_in = al->w0.dim(1);
      const std::size_t r = al->a.dim(0);
      auto w = al->w0.data();
      for (std::size_t i = 0; i < d_out; ++i) {
        for (std::size_t j = 0; j < d_in; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < r; ++k)
            acc += al->b.at(i * r + k) * al->a.at(k * d_in + j);
          w[i * d_in + j] += al->scale * acc;
        }
      }
      al->a = Tensor();
      al->b = Tensor();
      al->scale = 0.0;
    }
  }
  lora_.reset();
}

Tensor Denoiser::apply(Tape& tape, const AdaptedLinear& l, const Tensor& x) const {
  Tensor y = ops::linear(tape, x, l.w0);
  if (!l.a.defined()) return y;
  Tensor delta = ops::linear(tape, ops::linear(tape, x, l.a), l.b);
  return ops::add(tape, y, ops::scale(tape, delta, l.scale));
}

Tensor Denoiser::forward(Tape& tape, const DenoiserBatch& batch) const {
  const std::size_t B = batch.size();
  const std::size_t D = usize(cfg_.D), d = usize(cfg_.d_model);
  if (B == 0) throw UsageError("denoiser: empty batch");
  if (batch.tokens.size() != B * D || batch.steps.size() != B) {
    throw UsageError("denoiser: batch layout does not match D = " +
                     std::to_string(D));
  }
  for (int tok : batch.tokens) {
    if (tok < 0 || tok > cfg_.K) {
      throw UsageError("denoiser: token " + std::to_string(tok) +
                       " outside [0, " + std::to_string(cfg_.K) + "]");
    }
  }
  std::vector<int> step_rows(B * D), mem_rows(2 * B);
  for (std::size_t b = 0; b < B; ++b) {
    const int t = batch.steps[b];
    if (t < 1 || t > cfg_.T) {
      throw UsageError("denoiser: step " + std::to_string(t) + " outside [1, " +
                       std::to_string(cfg_.T) + "]");
    }
    const int c = batch.conds[b];
    if (c < 0 || c >= cfg_.n_conditions) {
      throw UsageError("denoiser: condition " + std::to_string(c) +
                       " outside [0, " + std::to_string(cfg_.n_conditions) + ")");
    }
    for (std::size_t i = 0; i < D; ++i) step_rows[b * D + i] = t;
    mem_rows[2 * b] = c;
    mem_rows[2 * b + 1] = cfg_.n_conditions;  // null memory token
  }

  std::vector<double> pos(B * D * d);
  for (std::size_t b = 0; b < B; ++b)
    std::copy(pos_enc_.begin(), pos_enc_.end(), pos.begin() + static_cast<long>(b * D * d));
  Tensor pos_t = Tensor::from({B * D, d}, std::move(pos));

  Tensor h = ops::add(tape, ops::embedding(tape, tok_emb_, batch.tokens), pos_t);
  h = ops::add(tape, h, ops::embedding(tape, time_emb_, step_rows));
  Tensor mem = ops::embedding(tape, cond_emb_, mem_rows);
  const auto heads = usize(cfg_.n_heads);

  for (const Block& blk : blocks_) {
    Tensor a = ops::layer_norm(tape, h, blk.ln1_g, blk.ln1_b);
    Tensor att = ops::attention(tape, apply(tape, blk.wq, a), apply(tape, blk.wk, a),
                                apply(tape, blk.wv, a), B, heads);
    h = ops::add(tape, h, apply(tape, blk.wp, att));

    a = ops::layer_norm(tape, h, blk.ln2_g, blk.ln2_b);
    Tensor cross = ops::attention(tape, ops::linear(tape, a, blk.cq),
                                  ops::linear(tape, mem, blk.ck),
                                  ops::linear(tape, mem, blk.cv), B, heads);
    h = ops::add(tape, h, ops::linear(tape, cross, blk.cp));

    a = ops::layer_norm(tape, h, blk.ln3_g, blk.ln3_b);
    Tensor m = ops::gelu(tape, ops::add_bias(tape, ops::linear(tape, a, blk.w1), blk.b1));
    h = ops::add(tape, h, ops::add_bias(tape, ops::linear(tape, m, blk.w2), blk.b2));
  }
  h = ops::layer_norm(tape, h, lnf_g_, lnf_b_);
  Tensor logits = ops::add_bias(tape, ops::linear(tape, h, w_out_), b_out_);
  return ops::softmax_rows(tape, logits);
}

CategoricalField Denoiser::forward(const TokenSequence& xt, int t, int cond) const {
  const int conds[] = {cond};
  auto out = predict(std::span<const TokenSequence>(&xt, 1), t, conds);
  return std::move(out.front());
}

std::vector<CategoricalField> Denoiser::predict(std::span<const TokenSequence> xt,
                                                int t,
                                                std::span<const int> conds) const {
  if (xt.size() != conds.size()) {
    throw UsageError("denoiser: sequence and condition counts differ");
  }
  const std::size_t D = usize(cfg_.D), K = usize(cfg_.K);
  DenoiserBatch batch;
  for (std::size_t b = 0; b < xt.size(); ++b) {
    if (xt[b].size() != D) {
      throw UsageError("denoiser: sequence length " +
                       std::to_string(xt[b].size()) + " != D = " + std::to_string(D));
    }
    batch.tokens.insert(batch.tokens.end(), xt[b].tokens.begin(), xt[b].tokens.end());
    batch.steps.push_back(t);
    batch.conds.push_back(conds[b]);
  }
  Tape tape(false);
  Tensor probs = forward(tape, batch);
  std::vector<CategoricalField> out;
  out.reserve(xt.size());
  for (std::size_t b = 0; b < xt.size(); ++b) {
    CategoricalField f(D, K);
    std::copy_n(probs.data().begin() + static_cast<long>(b * D * K), D * K,
                f.probs.begin());
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace cdd
