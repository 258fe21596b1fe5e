#include "cdd/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cdd/errors.hpp"

namespace cdd {

void CategoricalField::validate(double tol) const {
  if (probs.size() != rows * cols) {
    throw UsageError("categorical field: storage does not match shape");
  }
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (double v : row(i)) {
      if (!(v >= 0.0)) throw UsageError("categorical field: negative entry");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw UsageError("categorical field: row " + std::to_string(i) +
                       " sums to " + std::to_string(s));
    }
  }
}

namespace {

void check_real(const NoiseSchedule& s, int x0, const char* what) {
  if (x0 < 0 || x0 >= s.K()) {
    throw UsageError(std::string(what) + ": clean token must be real, got " +
                     std::to_string(x0));
  }
}

void check_state(const NoiseSchedule& s, int x, const char* what) {
  if (x < 0 || x > s.K()) {
    throw UsageError(std::string(what) + ": token " + std::to_string(x) +
                     " out of range");
  }
}

}  // namespace

TokenSequence forward_sample_with(const NoiseSchedule& s,
                                  const TokenSequence& seq0, int t,
                                  std::span<const double> uniforms) {
  if (seq0.t != 0) throw UsageError("forward_sample: input must be clean (t = 0)");
  if (uniforms.size() != seq0.size()) {
    throw UsageError("forward_sample: need one uniform per position");
  }
  TokenSequence out{seq0.tokens, t};
  if (t == 0) return out;
  for (std::size_t i = 0; i < seq0.size(); ++i) {
    check_real(s, seq0.tokens[i], "forward_sample");
    const auto q = s.marginal_distribution(seq0.tokens[i], t);
    out.tokens[i] =
        static_cast<int>(Rng::categorical_from_uniform(q, uniforms[i]));
  }
  return out;
}

TokenSequence forward_sample(const NoiseSchedule& s, const TokenSequence& seq0,
                             int t, Rng& rng) {
  std::vector<double> u(seq0.size());
  for (double& v : u) v = rng.uniform();
  return forward_sample_with(s, seq0, t, u);
}

std::vector<double> posterior(const NoiseSchedule& s, int xt, int x0, int t) {
  check_real(s, x0, "posterior");
  check_state(s, xt, "posterior");
  const double denom = s.marginal_prob(xt, x0, t);
  if (!(denom > 0.0)) {
    throw DegeneratePairError("posterior: q(x_t=" + std::to_string(xt) +
                              " | x_0=" + std::to_string(x0) + ") = 0 at t=" +
                              std::to_string(t));
  }
  std::vector<double> p(static_cast<std::size_t>(s.states()));
  for (int prev = 0; prev < s.states(); ++prev) {
    p[static_cast<std::size_t>(prev)] =
        s.step_prob(xt, prev, t) * s.marginal_prob(prev, x0, t - 1) / denom;
  }
  return p;
}

std::vector<double> posterior_block(const NoiseSchedule& s, int xt, int t) {
  const auto S = static_cast<std::size_t>(s.states());
  std::vector<double> block(static_cast<std::size_t>(s.K()) * S, 0.0);
  for (int x0 = 0; x0 < s.K(); ++x0) {
    if (!(s.marginal_prob(xt, x0, t) > 0.0)) continue;
    const auto p = posterior(s, xt, x0, t);
    std::copy(p.begin(), p.end(), block.begin() + static_cast<long>(x0 * S));
  }
  return block;
}

CategoricalField posterior_from_x0_prediction(const NoiseSchedule& s,
                                              const TokenSequence& xt,
                                              const CategoricalField& x0_dist,
                                              int t) {
  const auto K = static_cast<std::size_t>(s.K());
  const auto S = static_cast<std::size_t>(s.states());
  if (x0_dist.rows != xt.size() || x0_dist.cols != K) {
    throw UsageError("posterior_from_x0_prediction: prediction shape mismatch");
  }
  CategoricalField out(xt.size(), S);
  for (std::size_t i = 0; i < xt.size(); ++i) {
    const auto block = posterior_block(s, xt.tokens[i], t);
    auto w = x0_dist.row(i);
    auto dst = out.row(i);
    double mass = 0.0;
    for (std::size_t a = 0; a < K; ++a) {
      if (w[a] < 0.0) {
        throw UsageError("posterior_from_x0_prediction: negative belief");
      }
      if (w[a] == 0.0) continue;
      if (!(s.marginal_prob(xt.tokens[i], static_cast<int>(a), t) > 0.0)) continue;
      mass += w[a];
      for (std::size_t c = 0; c < S; ++c) dst[c] += w[a] * block[a * S + c];
    }
    if (!(mass > 0.0)) {
      throw DegeneratePairError(
          "posterior_from_x0_prediction: no predicted clean token can produce "
          "the observed state at position " + std::to_string(i));
    }
    if (mass != 1.0) {
      for (double& v : dst) v /= mass;
    }
  }
  return out;
}

std::string GenerationStats::to_jsonl() const {
  std::ostringstream os;
  os.precision(17);
  const std::size_t T = entropy_trace.size();
  for (std::size_t i = 0; i < T; ++i) {
    os << "{\"event\":\"step\",\"t\":" << (T - i)
       << ",\"mean_entropy\":" << entropy_trace[i] << "}\n";
  }
  os << "{\"event\":\"done\",\"residual_masks\":" << residual_masks << "}\n";
  return os.str();
}

GenerationResult generate(const X0Predictor& model, const NoiseSchedule& s,
                          std::span<const int> conds, std::size_t D, Rng& rng) {
  if (model.num_tokens() != s.K()) {
    throw UsageError("generate: model and schedule disagree on K");
  }
  const std::size_t B = conds.size();
  const auto S = static_cast<std::size_t>(s.states());
  GenerationResult result;
  auto& seqs = result.sequences;
  seqs.resize(B);
  const Prior prior = s.prior();
  for (auto& seq : seqs) {
    seq.t = s.T();
    seq.tokens.resize(D);
    for (int& tok : seq.tokens) tok = static_cast<int>(rng.categorical(prior.probs));
  }
  std::vector<CategoricalField> last_pred;
  for (int t = s.T(); t >= 1; --t) {
    auto preds = model.predict(seqs, t, conds);
    if (preds.size() != B) throw UsageError("generate: predictor batch mismatch");
    double entropy = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto field = posterior_from_x0_prediction(s, seqs[b], preds[b], t);
      for (std::size_t i = 0; i < D; ++i) {
        auto row = field.row(i);
        for (std::size_t c = 0; c < S; ++c) {
          if (row[c] > 0.0) entropy -= row[c] * std::log(row[c]);
        }
        seqs[b].tokens[i] = static_cast<int>(rng.categorical(row));
      }
      seqs[b].t = t - 1;
    }
    result.stats.entropy_trace.push_back(
        B * D > 0 ? entropy / static_cast<double>(B * D) : 0.0);
    if (t == 1) last_pred = std::move(preds);
  }
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < D; ++i) {
      int& tok = seqs[b].tokens[i];
      if (tok != s.mask()) continue;
      auto row = last_pred[b].row(i);
      tok = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      ++result.stats.residual_masks;
    }
  }
  return result;
}

TokenSequence generate_one(const X0Predictor& model, const NoiseSchedule& s,
                           int cond, std::size_t D, Rng& rng,
                           GenerationStats* stats) {
  const int conds[] = {cond};
  auto r = generate(model, s, conds, D, rng);
  if (stats) *stats = r.stats;
  return std::move(r.sequences.front());
}

}  // namespace cdd
