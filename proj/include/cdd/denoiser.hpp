#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdd/diffusion.hpp"
#include "cdd/rng.hpp"
#include "cdd/tensor.hpp"

namespace cdd {

enum class LoraTarget { q, k, v, p };

std::string to_string(LoraTarget t);
LoraTarget parse_lora_target(const std::string& s);
// Accepts "q,k,v,p" style lists.
std::vector<LoraTarget> parse_lora_targets(const std::string& s);
std::string to_string(const std::vector<LoraTarget>& targets);

struct LoraConfig {
  int r = 8;
  double alpha = 16.0;
  std::vector<LoraTarget> targets{LoraTarget::q, LoraTarget::k, LoraTarget::v,
                                  LoraTarget::p};

  double scale() const { return alpha / r; }
  void validate(int d_model) const;
};

struct DenoiserConfig {
  int K = 8;
  int T = 10;
  int D = 4;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_cond = 16;
  int n_conditions = 4;
  int d_ff = 0;  // 0 selects 4 * d_model

  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;
  // Stable text form used for the architecture hash.
  std::string canonical() const;
  bool operator==(const DenoiserConfig&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Rows of a batch: tokens holds batch * D entries, one step and condition
// per sequence.
struct DenoiserBatch {
  std::vector<int> tokens;
  std::vector<int> steps;
  std::vector<int> conds;

  std::size_t size() const { return conds.size(); }
};

// Conditional transformer predicting p(x0 | x_t, t, y) over K real tokens.
//
// Pre-norm blocks: self-attention with projections W_q, W_k, W_v, W_p (the
// LoRA targets), cross-attention onto a two-token memory [condition
// embedding, null token], and a GELU MLP. Token, learned timestep and fixed
// sinusoidal position embeddings are summed at the input.
//
// Copying deep-copies every tensor.
class Denoiser : public X0Predictor {
 public:
  Denoiser(const DenoiserConfig& cfg, Rng& rng);
  Denoiser(const Denoiser& other);
  Denoiser& operator=(const Denoiser& other);
  Denoiser(Denoiser&&) noexcept = default;
  Denoiser& operator=(Denoiser&&) noexcept = default;
  ~Denoiser() override = default;

  const DenoiserConfig& config() const { return cfg_; }

  // Probabilities [batch * D, K].
  Tensor forward(Tape& tape, const DenoiserBatch& batch) const;
  CategoricalField forward(const TokenSequence& xt, int t, int cond) const;

  int num_tokens() const override { return cfg_.K; }
  std::vector<CategoricalField> predict(std::span<const TokenSequence> xt,
                                        int t,
                                        std::span<const int> conds) const override;

  // Wraps every targeted projection with A ~ N(0, 0.02^2), B = 0 and
  // freezes all base parameters.
  void attach_lora(const LoraConfig& cfg, Rng& rng);
  // Folds W0 += (alpha / r) B A into the base weights and drops adapters.
  void merge_lora();
  bool has_lora() const { return lora_.has_value(); }
  const std::optional<LoraConfig>& lora_config() const { return lora_; }

  void set_base_trainable(bool on);

  std::vector<NamedTensor> base_parameters() const;
  std::vector<NamedTensor> lora_parameters() const;
  std::vector<NamedTensor> parameters() const;
  std::vector<Tensor> trainable() const;
  std::size_t count_trainable() const;

  // Overwrite values of a named tensor (checkpoint loading).
  void assign(const std::string& name, std::span<const double> values);

 private:
  struct AdaptedLinear {
    Tensor w0;  // [d_out, d_in]
    Tensor a;   // [r, d_in]
    Tensor b;   // [d_out, r]
    double scale = 0.0;
  };

  struct Block {
    Tensor ln1_g, ln1_b;
    AdaptedLinear wq, wk, wv, wp;
    Tensor ln2_g, ln2_b;
    Tensor cq, ck, cv, cp;
    Tensor ln3_g, ln3_b;
    Tensor w1, b1, w2, b2;
  };

  void for_each_base(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_base(
      const std::function<void(const std::string&, const Tensor&)>& fn) const;
  static AdaptedLinear* target(Block& blk, LoraTarget t);
  Tensor apply(Tape& tape, const AdaptedLinear& l, const Tensor& x) const;
  void deep_copy_from(const Denoiser& other);

  DenoiserConfig cfg_;
  std::optional<LoraConfig> lora_;
  Tensor tok_emb_, time_emb_, cond_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_, w_out_, b_out_;
  std::vector<double> pos_enc_;  // [D, d_model], constant
};

}  // namespace cdd
