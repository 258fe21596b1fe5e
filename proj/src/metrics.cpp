#include "cdd/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cdd/errors.hpp"
#include "cdd/loss.hpp"

namespace cdd {

namespace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

constexpr double kEigenFloor = 1e-10;

void require_finite(const FeatureSet& f, const char* op) {
  for (double v : f.values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite feature");
  }
}

std::vector<std::size_t> sorted_order(std::span<const double> values, std::size_t n,
                                      std::size_t d);

// Rows are summed in sorted order so the fit is exactly order-invariant.
void gaussian_fit(const FeatureSet& f, Vector& mu, Matrix& cov) {
  const auto n = static_cast<Eigen::Index>(f.n);
  const auto d = static_cast<Eigen::Index>(f.d);
  Matrix x(n, d);
  const auto order = sorted_order(f.values, f.n, f.d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto r = f.row(order[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = r[static_cast<std::size_t>(j)];
  }
  mu = x.colwise().mean().transpose();
  const Matrix centered = x.rowwise() - mu.transpose();
  cov = centered.transpose() * centered / static_cast<double>(f.n - 1);
}

// Symmetric PSD square root with small or negative eigenvalues clamped to 0.
Matrix psd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()));
  Vector ev = es.eigenvalues();
  for (auto& v : ev) v = v < kEigenFloor ? 0.0 : std::sqrt(v);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

std::vector<std::size_t> sorted_order(std::span<const double> values, std::size_t n,
                                      std::size_t d) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(values.begin() + static_cast<long>(a * d),
                                        values.begin() + static_cast<long>((a + 1) * d),
                                        values.begin() + static_cast<long>(b * d),
                                        values.begin() + static_cast<long>((b + 1) * d));
  });
  return idx;
}

// Lexicographic sort of row indices, then a seeded shuffle.
std::vector<std::size_t> canonical_order(std::span<const double> values, std::size_t n,
                                         std::size_t d, std::uint64_t seed) {
  auto idx = sorted_order(values, n, d);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

MeanStd summarize(const std::vector<double>& v) {
  MeanStd out;
  for (double x : v) out.mean += x;
  out.mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - out.mean) * (x - out.mean);
  out.std = std::sqrt(var / static_cast<double>(v.size()));
  return out;
}

double poly_kernel(std::span<const double> x, std::span<const double> y) {
  double dot = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) dot += x[i] * y[i];
  const double z = dot / static_cast<double>(x.size()) + 1.0;
  return z * z * z;
}

std::vector<double> mean_row(const ClassPosteriors& p) {
  std::vector<double> m(p.classes, 0.0);
  for (std::size_t i = 0; i < p.n; ++i)
    for (std::size_t c = 0; c < p.classes; ++c) m[c] += p.probs[i * p.classes + c];
  for (double& v : m) v /= static_cast<double>(p.n);
  return m;
}

std::vector<TokenSequence> sequences_of(const Dataset& data) {
  std::vector<TokenSequence> out;
  out.reserve(data.size());
  for (const Record& r : data.records) out.push_back(r.seq);
  return out;
}

}  // namespace

FeatureSet sequence_features(std::span<const TokenSequence> seqs, int K) {
  const auto k = static_cast<std::size_t>(K);
  FeatureSet f(seqs.size(), k + k * k);
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& tok = seqs[s].tokens;
    auto row = f.row(s);
    for (int t : tok) {
      if (t < 0 || t >= K) throw UsageError("sequence_features: token out of range");
    }
    for (int t : tok) row[static_cast<std::size_t>(t)] += 1.0 / static_cast<double>(tok.size());
    if (tok.size() > 1) {
      const double w = 1.0 / static_cast<double>(tok.size() - 1);
      for (std::size_t i = 1; i < tok.size(); ++i) {
        row[k + static_cast<std::size_t>(tok[i - 1]) * k + static_cast<std::size_t>(tok[i])] += w;
      }
    }
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& v : row) v /= norm;
    }
  }
  return f;
}

double fid(const FeatureSet& a, const FeatureSet& b) {
  if (a.d != b.d) throw UsageError("fid: feature dimensions differ");
  if (a.n < 2 || b.n < 2) throw UsageError("fid: need at least 2 samples per set");
  require_finite(a, "fid");
  require_finite(b, "fid");
  Vector mu_a, mu_b;
  Matrix cov_a, cov_b;
  gaussian_fit(a, mu_a, cov_a);
  gaussian_fit(b, mu_b, cov_b);
  const Matrix root_a = psd_sqrt(cov_a);
  const Matrix inner = root_a * cov_b * root_a;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (inner + inner.transpose()),
                                           Eigen::EigenvaluesOnly);
  double tr_sqrt = 0.0;
  for (double v : es.eigenvalues()) tr_sqrt += v < kEigenFloor ? 0.0 : std::sqrt(v);
  const double value =
      (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

MeanStd kid(const FeatureSet& a, const FeatureSet& b, std::uint64_t seed,
            std::size_t subsets) {
  if (a.d != b.d) throw UsageError("kid: feature dimensions differ");
  if (subsets == 0) throw UsageError("kid: need at least one subset");
  const std::size_t m = std::min(a.n, b.n) / subsets;
  if (m < 2) {
    throw UsageError("kid: need at least " + std::to_string(2 * subsets) +
                     " samples per set");
  }
  require_finite(a, "kid");
  require_finite(b, "kid");
  const auto ia = canonical_order(a.values, a.n, a.d, seed);
  const auto ib = canonical_order(b.values, b.n, b.d, seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> values;
  for (std::size_t s = 0; s < subsets; ++s) {
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const auto xi = a.row(ia[s * m + i]);
      const auto yi = b.row(ib[s * m + i]);
      for (std::size_t j = 0; j < m; ++j) {
        const auto xj = a.row(ia[s * m + j]);
        const auto yj = b.row(ib[s * m + j]);
        if (i != j) {
          kxx += poly_kernel(xi, xj);
          kyy += poly_kernel(yi, yj);
        }
        kxy += poly_kernel(xi, yj);
      }
    }
    const double md = static_cast<double>(m);
    values.push_back((kxx + kyy) / (md * (md - 1.0)) - 2.0 * kxy / (md * md));
  }
  return summarize(values);
}

MeanStd inception_score(const ClassPosteriors& p, std::uint64_t seed, std::size_t splits) {
  const std::size_t need = std::max<std::size_t>(splits, 10);
  if (splits == 0 || p.n < need) {
    throw UsageError("inception_score: need at least " + std::to_string(need) + " samples");
  }
  const auto order = canonical_order(p.probs, p.n, p.classes, seed);
  std::vector<double> scores;
  std::size_t start = 0;
  for (std::size_t s = 0; s < splits; ++s) {
    const std::size_t len = p.n / splits + (s < p.n % splits ? 1 : 0);
    std::vector<double> marginal(p.classes, 0.0);
    for (std::size_t i = start; i < start + len; ++i) {
      const auto r = p.row(order[i]);
      for (std::size_t c = 0; c < p.classes; ++c) marginal[c] += r[c];
    }
    for (double& v : marginal) v /= static_cast<double>(len);
    double kl = 0.0;
    for (std::size_t i = start; i < start + len; ++i) kl += kl_categorical(p.row(order[i]), marginal);
    scores.push_back(std::exp(kl / static_cast<double>(len)));
    start += len;
  }
  return summarize(scores);
}

double kl_metric(const ClassPosteriors& gen, const ClassPosteriors& ref) {
  if (gen.n == 0 || ref.n == 0) throw UsageError("kl_metric: empty posterior set");
  if (gen.classes != ref.classes) throw UsageError("kl_metric: class counts differ");
  return kl_categorical(mean_row(gen), mean_row(ref));
}

ClassPosteriors bayes_posteriors(const SyntheticTask& task,
                                 std::span<const TokenSequence> seqs) {
  ClassPosteriors out;
  out.n = seqs.size();
  out.classes = static_cast<std::size_t>(task.C);
  out.probs.assign(out.n * out.classes, 0.0);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    double z = 0.0;
    for (int c = 0; c < task.C; ++c) {
      const double p = sequence_probability(task, c, seqs[i].tokens);
      out.probs[i * out.classes + static_cast<std::size_t>(c)] = p;
      z += p;
    }
    for (std::size_t c = 0; c < out.classes; ++c) {
      auto& v = out.probs[i * out.classes + c];
      v = z > 0.0 ? v / z : 1.0 / static_cast<double>(out.classes);
    }
  }
  return out;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw UsageError("total_variation: support mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

double MetricReport::mean_tv() const {
  if (per_condition_tv.empty()) return 0.0;
  return std::accumulate(per_condition_tv.begin(), per_condition_tv.end(), 0.0) /
         static_cast<double>(per_condition_tv.size());
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["n"] = n;
  j["fid"] = fid;
  j["kid_mean"] = kid_mean;
  j["kid_std"] = kid_std;
  j["isc_mean"] = isc_mean;
  j["isc_std"] = isc_std;
  j["kl"] = kl;
  j["kl_definition"] = "KL(mean generated class posterior || mean reference class posterior)";
  j["cond_accuracy"] = cond_accuracy;
  j["tv_available"] = tv_available;
  j["per_condition_tv"] = per_condition_tv;
  if (tv_available) j["mean_tv"] = mean_tv();
  j["feature_map"] = "unigram+bigram frequencies, L2-normalized";
  if (!notice.empty()) j["notice"] = notice;
  return j.dump(2) + "\n";
}

std::string MetricReport::csv_header() {
  return "label,n,fid,kid_mean,kid_std,isc_mean,isc_std,kl,cond_accuracy,mean_tv";
}

std::string MetricReport::csv_row(const std::string& label) const {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,",
                label.c_str(), n, fid, kid_mean, kid_std, isc_mean, isc_std, kl,
                cond_accuracy);
  std::string row = buf;
  if (tv_available) {
    std::snprintf(buf, sizeof buf, "%.17g", mean_tv());
    row += buf;
  }
  return row;
}

MetricReport oracle_report(const SyntheticTask& task, const Dataset& generated,
                           const Dataset& reference, std::uint64_t seed) {
  if (generated.size() == 0 || reference.size() == 0) {
    throw UsageError("oracle_report: empty generated or reference set");
  }
  for (const Record& r : generated.records) {
    if (r.cond < 0 || r.cond >= task.C || r.seq.size() != static_cast<std::size_t>(task.D)) {
      throw UsageError("oracle_report: record does not fit the task");
    }
  }
  MetricReport rep;
  rep.n = generated.size();
  const auto gen_seqs = sequences_of(generated);
  const auto ref_seqs = sequences_of(reference);

  const ClassPosteriors gen_post = bayes_posteriors(task, gen_seqs);
  const ClassPosteriors ref_post = bayes_posteriors(task, ref_seqs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gen_post.n; ++i) {
    const auto r = gen_post.row(i);
    const auto best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    correct += best == generated.records[i].cond ? 1 : 0;
  }
  rep.cond_accuracy = static_cast<double>(correct) / static_cast<double>(gen_post.n);

  const FeatureSet fa = sequence_features(gen_seqs, task.K);
  const FeatureSet fb = sequence_features(ref_seqs, task.K);
  rep.fid = fid(fa, fb);
  const MeanStd k = kid(fa, fb, seed);
  rep.kid_mean = k.mean;
  rep.kid_std = k.std;
  const MeanStd is = inception_score(gen_post, seed);
  rep.isc_mean = is.mean;
  rep.isc_std = is.std;
  rep.kl = kl_metric(gen_post, ref_post);

  std::size_t table = 1;
  for (int i = 0; i < task.D && table <= kOracleGuard; ++i) table *= static_cast<std::size_t>(task.K);
  if (table > kOracleGuard) {
    rep.notice = "K^D exceeds the enumeration guard; per-condition TV omitted";
    return rep;
  }
  rep.tv_available = true;
  for (int c = 0; c < task.C; ++c) {
    std::vector<double> empirical(table, 0.0);
    std::size_t count = 0;
    for (const Record& r : generated.records) {
      if (r.cond != c) continue;
      empirical[sequence_index(r.seq.tokens, task.K)] += 1.0;
      ++count;
    }
    if (count == 0) {
      rep.per_condition_tv.push_back(1.0);
      rep.notice += (rep.notice.empty() ? "" : "; ") + std::string("condition ") +
                    std::to_string(c) + " has no generated samples (TV set to 1)";
      continue;
    }
    for (double& v : empirical) v /= static_cast<double>(count);
    rep.per_condition_tv.push_back(total_variation(empirical, oracle_distribution(task, c)));
  }
  return rep;
}

std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-18s %10s %18s %10s %22s %9s %9s\n", "Model", "FID",
                "ISc", "KL", "KID", "CondAcc", "MeanTV");
  os << buf;
  for (const auto& [label, r] : rows) {
    char isc[64], kidbuf[64], tv[32];
    std::snprintf(isc, sizeof isc, "%.3f +- %.3f", r.isc_mean, r.isc_std);
    std::snprintf(kidbuf, sizeof kidbuf, "%.2e +- %.1e", r.kid_mean, r.kid_std);
    if (r.tv_available) {
      std::snprintf(tv, sizeof tv, "%.4f", r.mean_tv());
    } else {
      std::snprintf(tv, sizeof tv, "n/a");
    }
    std::snprintf(buf, sizeof buf, "%-18s %10.4f %18s %10.4f %22s %9.4f %9s\n",
                  label.c_str(), r.fid, isc, r.kl, kidbuf, r.cond_accuracy, tv);
    os << buf;
  }
  return os.str();
}

}  // namespace cdd
