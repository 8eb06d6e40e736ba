#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <string>
#include <vector>

#include "fd2/cal.hpp"
#include "fd2/constraints.hpp"
#include "fd2/core.hpp"

// Numerical verification of the appendix statements: the center-margin bound,
// the constraint/score identity, the covariance-trace identities and bounds,
// and the attention-diversity chain. Everything here is brute force at fp64.

namespace fd2::theory {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major list of vectors

struct GeometryInstance {
  Mat centers;  // K class centers
  Vec z;        // sample feature
  int y = 0;    // its label
};

inline double sq(double x) { return x * x; }

// Biased covariance trace of a list of equal-length vectors.
inline double trace_of_covariance(const Mat& vecs) {
  if (vecs.empty()) throw ValueError("trace_of_covariance: empty list");
  const std::size_t p = vecs[0].size();
  Vec mean(p, 0.0);
  for (const auto& v : vecs) {
    if (v.size() != p) throw DimError("trace_of_covariance: ragged input");
    for (std::size_t j = 0; j < p; ++j) mean[j] += v[j];
  }
  for (auto& m : mean) m /= double(vecs.size());
  double tr = 0;
  for (const auto& v : vecs)
    for (std::size_t j = 0; j < p; ++j) tr += sq(v[j] - mean[j]);
  return tr / double(vecs.size());
}

// (1/2N^2) * sum_ij ||A_i - A_j||^2
inline double pairwise_dispersion(const Mat& vecs) {
  const std::size_t n = vecs.size();
  double s = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      s += sq(vnorm(vsub(vecs[i], vecs[j])));
  return s / (2.0 * double(n) * double(n));
}

// ---------------------------------------------------------------------------
// Proposition 1: margin lower bound from intra-class deviation and center
// distances.
// ---------------------------------------------------------------------------

struct Prop1Report {
  double margin = 0;        // exact average center-based margin
  double bound = 0;         // E[d^2 - 2 r d]
  double r = 0;             // intra-class deviation
  bool bound_holds = false;
  bool condition_holds = false;   // r < sum d^2 / (2 sum d)
  bool positive_when_condition = true;
};

inline Prop1Report verify_prop1(const GeometryInstance& inst) {
  const int k = static_cast<int>(inst.centers.size());
  if (k < 2) throw DimError("verify_prop1: need K >= 2 centers");
  if (inst.y < 0 || inst.y >= k) throw IndexError("verify_prop1: bad label");
  Prop1Report rep;
  const Vec& own = inst.centers[static_cast<std::size_t>(inst.y)];
  rep.r = vnorm(vsub(inst.z, own));
  double margin = 0, bound = 0, sum_d = 0, sum_d2 = 0;
  int count = 0;
  for (int j = 0; j < k; ++j) {
    if (j == inst.y) continue;
    const Vec& other = inst.centers[static_cast<std::size_t>(j)];
    const double d = vnorm(vsub(other, own));
    margin += sq(vnorm(vsub(inst.z, other))) - sq(rep.r);
    bound += d * d - 2.0 * rep.r * d;
    sum_d += d;
    sum_d2 += d * d;
    ++count;
  }
  rep.margin = margin / count;
  rep.bound = bound / count;
  rep.bound_holds = rep.margin >= rep.bound - 1e-9;
  rep.condition_holds = sum_d > 0 && rep.r < sum_d2 / (2.0 * sum_d);
  if (rep.condition_holds) rep.positive_when_condition = rep.margin > 0;
  return rep;
}

// ---------------------------------------------------------------------------
// Corollary 1: fg_constraint + prototype_score == 1 - beta
// ---------------------------------------------------------------------------

inline double verify_cor1(const Vec& z, const cal::PrototypeBank<double>& bank,
                          int y, double beta, double eps) {
  const double lf = constraints::fg_constraint(z, bank, y, beta, eps);
  const double score = constraints::prototype_score(z, bank, y, beta, eps);
  return std::abs(lf + score - (1.0 - beta));
}

// ---------------------------------------------------------------------------
// Trace identity: tr(cov) == mean pairwise squared distance / 2
// ---------------------------------------------------------------------------

inline double verify_trace_identity(const Mat& vecs) {
  return std::abs(trace_of_covariance(vecs) - pairwise_dispersion(vecs));
}

// ---------------------------------------------------------------------------
// Representation-trace sandwich under linear pooling h = G^T A
// ---------------------------------------------------------------------------

struct SandwichReport {
  double tr_a = 0, tr_h = 0, lower = 0, upper = 0;
  bool holds = false;
  double violation = 0;
};

inline SandwichReport verify_sandwich(const Mat& vecs,
                                      const Eigen::MatrixXd& pooling) {
  const std::size_t p = vecs.empty() ? 0 : vecs[0].size();
  if (static_cast<std::size_t>(pooling.rows()) != p)
    throw DimError("verify_sandwich: pooling rows must match vector length");
  SandwichReport rep;
  rep.tr_a = trace_of_covariance(vecs);
  Mat hs;
  for (const auto& v : vecs) {
    Eigen::Map<const Eigen::VectorXd> a(v.data(), static_cast<Eigen::Index>(p));
    Eigen::VectorXd h = pooling.transpose() * a;
    hs.emplace_back(h.data(), h.data() + h.size());
  }
  rep.tr_h = trace_of_covariance(hs);
  // extreme eigenvalues of G G^T (zero-padded spectrum when rank-deficient)
  Eigen::MatrixXd gram = pooling * pooling.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  const double lam_min = std::max(0.0, es.eigenvalues().minCoeff());
  const double lam_max = std::max(0.0, es.eigenvalues().maxCoeff());
  rep.lower = lam_min * rep.tr_a;
  rep.upper = lam_max * rep.tr_a;
  rep.violation = std::max({0.0, rep.lower - rep.tr_h - 1e-9,
                            rep.tr_h - rep.upper - 1e-9});
  rep.holds = rep.tr_h >= rep.lower - 1e-9 && rep.tr_h <= rep.upper + 1e-9;
  return rep;
}

// ---------------------------------------------------------------------------
// Proposition 2 with a constructed-linear generation map A = J x0, whose
// Lipschitz constant is the spectral norm of J. The abstract nonlinear
// generation map of actual synthesis has an unknowable constant; only this
// constructed case is tested.
// ---------------------------------------------------------------------------

struct Prop2Report {
  double tr_a = 0, bound = 0, lipschitz = 0;
  bool holds = false;
};

inline Prop2Report verify_prop2(const Mat& inits, const Eigen::MatrixXd& map) {
  if (inits.empty()) throw ValueError("verify_prop2: no initializations");
  const std::size_t din = inits[0].size();
  if (static_cast<std::size_t>(map.cols()) != din)
    throw DimError("verify_prop2: map columns must match init dimension");
  Prop2Report rep;
  Mat attn;
  for (const auto& x : inits) {
    Eigen::Map<const Eigen::VectorXd> xv(x.data(),
                                         static_cast<Eigen::Index>(din));
    Eigen::VectorXd a = map * xv;
    attn.emplace_back(a.data(), a.data() + a.size());
  }
  rep.tr_a = trace_of_covariance(attn);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(map * map.transpose());
  rep.lipschitz = std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
  const std::size_t n = inits.size();
  double pair_sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      pair_sum += sq(vnorm(vsub(inits[i], inits[j])));
  rep.bound = rep.lipschitz * rep.lipschitz * pair_sum /
              (2.0 * double(n) * double(n));
  rep.holds = rep.tr_a <= rep.bound + 1e-9;
  return rep;
}

// ---------------------------------------------------------------------------
// Corollary 2: attention-diversity lower bound, plus its chain steps
// (metric equivalence, Jensen, partial-pair trace bound), all at eps = 0.
// ---------------------------------------------------------------------------

struct Cor2Report {
  double tr_a = 0;
  double lower = 0;       // ((i-1)/N^2) eta_lower^2 (E l2)^2
  double eta_lower = 0;
  double eta_upper = 0;
  bool holds = false;
  bool metric_equivalence_holds = false;
  bool jensen_holds = false;
  bool trace_lower_holds = false;
};

inline Cor2Report verify_cor2(const Mat& vecs, int i,
                              std::optional<double> eta_lower = std::nullopt) {
  const int n = static_cast<int>(vecs.size());
  if (i <= 1 || i > n)
    throw IndexError("verify_cor2: sample index must satisfy 1 < i <= N_S");
  Cor2Report rep;
  const Vec& cur = vecs[static_cast<std::size_t>(i - 1)];

  double eta_lo = 0, eta_hi = 0;
  bool first = true;
  for (int j = 0; j < i - 1; ++j) {
    const double s =
        vnorm(cur) + vnorm(vecs[static_cast<std::size_t>(j)]);  // eps = 0
    eta_lo = first ? s : std::min(eta_lo, s);
    eta_hi = first ? s : std::max(eta_hi, s);
    first = false;
  }
  rep.eta_lower = eta_lower.value_or(eta_lo);
  rep.eta_upper = eta_hi;
  if (eta_lower && *eta_lower > eta_lo + 1e-12)
    throw ValueError("verify_cor2: supplied eta_lower is not a valid bound");

  double mean_l2 = 0, mean_norm = 0, mean_sq = 0;
  rep.metric_equivalence_holds = true;
  for (int j = 0; j < i - 1; ++j) {
    const Vec& prev = vecs[static_cast<std::size_t>(j)];
    const double dist = vnorm(vsub(cur, prev));
    const double l2 = constraints::norm_l2(cur, prev, 0.0);
    mean_l2 += l2;
    mean_norm += dist;
    mean_sq += dist * dist;
    if (rep.eta_upper > 0 && dist / rep.eta_upper > l2 + 1e-9)
      rep.metric_equivalence_holds = false;
    if (rep.eta_lower > 0 && l2 > dist / rep.eta_lower + 1e-9)
      rep.metric_equivalence_holds = false;
  }
  const double m = double(i - 1);
  mean_l2 /= m;
  mean_norm /= m;
  mean_sq /= m;

  rep.jensen_holds = mean_sq >= sq(mean_norm) - 1e-9 &&
                     sq(mean_norm) >= sq(rep.eta_lower) * sq(mean_l2) - 1e-9;
  rep.tr_a = trace_of_covariance(vecs);
  const double partial = (m / (double(n) * n)) * mean_sq;
  rep.trace_lower_holds = rep.tr_a >= partial - 1e-9;
  rep.lower = (m / (double(n) * n)) * sq(rep.eta_lower) * sq(mean_l2);
  rep.holds = rep.tr_a >= rep.lower - 1e-9 && rep.metric_equivalence_holds &&
              rep.jensen_holds && rep.trace_lower_holds;
  return rep;
}

// ---------------------------------------------------------------------------
// Seeded randomized suite with tightness witnesses
// ---------------------------------------------------------------------------

struct TheoryResult {
  std::string statement;
  int trials = 0;
  double max_residual = 0;
  bool tightness_witness = false;
  bool passed = false;
};

namespace detail {

inline Vec random_vec(Rng& rng, int d, double scale = 2.0) {
  Vec v(static_cast<std::size_t>(d));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

inline Mat random_mat(Rng& rng, int n, int d, double scale = 2.0) {
  Mat m;
  for (int i = 0; i < n; ++i) m.push_back(random_vec(rng, d, scale));
  return m;
}

inline Eigen::MatrixXd random_eigen(Rng& rng, int rows, int cols,
                                    double scale = 1.5) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, scale);
  return m;
}

inline cal::PrototypeBank<double> random_bank(Rng& rng, int k, int d) {
  cal::PrototypeBank<double> bank(k, d, 0.1);
  for (int c = 0; c < k; ++c)
    cal::update_prototype(bank, c, random_vec(rng, d));
  // a second pass so prototypes are interior convex combinations too
  for (int c = 0; c < k; ++c)
    if (rng.uniform() < 0.5) cal::update_prototype(bank, c, random_vec(rng, d));
  return bank;
}

}  // namespace detail

inline std::vector<TheoryResult> run_theory_suite(std::uint64_t seed,
                                                  int trials = 1000) {
  std::vector<TheoryResult> results;
  const double kTight = 1e-9;

  {  // Proposition 1
    Rng rng = Rng(seed).fork(1);
    TheoryResult r{"prop1_center_margin_bound", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      GeometryInstance inst;
      const int k = 2 + static_cast<int>(rng.uniform_int(5));
      const int d = 2 + static_cast<int>(rng.uniform_int(7));
      inst.centers = detail::random_mat(rng, k, d);
      inst.y = static_cast<int>(rng.uniform_int(k));
      inst.z = inst.centers[static_cast<std::size_t>(inst.y)];
      for (auto& x : inst.z) x += rng.normal(0.0, 0.8);
      const auto rep = verify_prop1(inst);
      r.max_residual = std::max(r.max_residual,
                                std::max(0.0, rep.bound - rep.margin));
      if (!rep.bound_holds || !rep.positive_when_condition) r.passed = false;
      if (std::abs(rep.margin - rep.bound) < kTight) r.tightness_witness = true;
    }
    {  // collinear Cauchy-Schwarz-tight witness
      GeometryInstance inst;
      inst.centers = {{0.0, 0.0}, {2.0, 0.0}};
      inst.z = {0.5, 0.0};
      inst.y = 0;
      const auto rep = verify_prop1(inst);
      if (std::abs(rep.margin - rep.bound) < kTight) r.tightness_witness = true;
      if (!rep.bound_holds) r.passed = false;
    }
    if (r.max_residual >= 1e-9) r.passed = false;
    results.push_back(r);
  }

  {  // Corollary 1
    Rng rng = Rng(seed).fork(2);
    TheoryResult r{"cor1_constraint_score_identity", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      const int k = 2 + static_cast<int>(rng.uniform_int(5));
      const int d = 2 + static_cast<int>(rng.uniform_int(7));
      auto bank = detail::random_bank(rng, k, d);
      const Vec z = detail::random_vec(rng, d);
      const double beta = rng.uniform();
      const double eps = rng.uniform() < 0.5 ? 0.0 : 1e-8;
      const double res = verify_cor1(z, bank, static_cast<int>(rng.uniform_int(k)),
                                     beta, eps);
      r.max_residual = std::max(r.max_residual, res);
      if (res < 1e-12) r.tightness_witness = true;  // the identity is exact
    }
    if (r.max_residual >= 1e-12) r.passed = false;
    results.push_back(r);
  }

  {  // pairwise trace identity
    Rng rng = Rng(seed).fork(3);
    TheoryResult r{"pairwise_trace_identity", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      const int n = 1 + static_cast<int>(rng.uniform_int(6));
      const int p = 1 + static_cast<int>(rng.uniform_int(8));
      const double res = verify_trace_identity(detail::random_mat(rng, n, p));
      r.max_residual = std::max(r.max_residual, res);
      if (res < kTight) r.tightness_witness = true;
    }
    if (r.max_residual >= 1e-9) r.passed = false;
    results.push_back(r);
  }

  {  // representation sandwich
    Rng rng = Rng(seed).fork(4);
    TheoryResult r{"representation_trace_sandwich", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      const int p = 2 + static_cast<int>(rng.uniform_int(5));
      const int d = 1 + static_cast<int>(rng.uniform_int(6));
      const int n = 2 + static_cast<int>(rng.uniform_int(5));
      const auto rep = verify_sandwich(detail::random_mat(rng, n, p),
                                       detail::random_eigen(rng, p, d));
      r.max_residual = std::max(r.max_residual, rep.violation);
      if (!rep.holds) r.passed = false;
    }
    {  // isotropic pooling makes both sides tight
      const Mat vecs = {{1.0, 0.0, 2.0}, {-1.0, 1.5, 0.0}, {0.5, -0.5, 1.0}};
      const auto rep =
          verify_sandwich(vecs, 2.0 * Eigen::MatrixXd::Identity(3, 3));
      if (std::abs(rep.tr_h - rep.lower) < kTight &&
          std::abs(rep.tr_h - rep.upper) < kTight)
        r.tightness_witness = true;
      if (!rep.holds) r.passed = false;
    }
    results.push_back(r);
  }

  {  // Proposition 2
    Rng rng = Rng(seed).fork(5);
    TheoryResult r{"prop2_attention_diversity_bound", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      const int din = 1 + static_cast<int>(rng.uniform_int(6));
      const int p = 1 + static_cast<int>(rng.uniform_int(6));
      const int n = 2 + static_cast<int>(rng.uniform_int(5));
      const auto rep = verify_prop2(detail::random_mat(rng, n, din),
                                    detail::random_eigen(rng, p, din));
      r.max_residual =
          std::max(r.max_residual, std::max(0.0, rep.tr_a - rep.bound));
      if (!rep.holds) r.passed = false;
    }
    {  // identity map: the bound collapses to the trace identity
      Rng wrng = Rng(seed).fork(55);
      const auto rep = verify_prop2(detail::random_mat(wrng, 4, 3),
                                    Eigen::MatrixXd::Identity(3, 3));
      if (std::abs(rep.tr_a - rep.bound) < kTight) r.tightness_witness = true;
      if (!rep.holds) r.passed = false;
    }
    if (r.max_residual >= 1e-9) r.passed = false;
    results.push_back(r);
  }

  {  // Corollary 2
    Rng rng = Rng(seed).fork(6);
    TheoryResult r{"cor2_diversity_lower_bound", trials, 0.0, false, true};
    for (int t = 0; t < trials; ++t) {
      const int n = 2 + static_cast<int>(rng.uniform_int(5));
      const int p = 1 + static_cast<int>(rng.uniform_int(6));
      const Mat vecs = detail::random_mat(rng, n, p);
      const int i = 2 + static_cast<int>(rng.uniform_int(n - 1));
      const auto rep = verify_cor2(vecs, i);
      r.max_residual =
          std::max(r.max_residual, std::max(0.0, rep.lower - rep.tr_a));
      if (!rep.holds) r.passed = false;
    }
    {  // antipodal pair: equality
      const Mat vecs = {{1.0, 0.0}, {-1.0, 0.0}};
      const auto rep = verify_cor2(vecs, 2);
      if (std::abs(rep.tr_a - rep.lower) < kTight) r.tightness_witness = true;
      if (!rep.holds) r.passed = false;
    }
    if (r.max_residual >= 1e-9) r.passed = false;
    results.push_back(r);
  }

  return results;
}

inline std::string format_theory_table(const std::vector<TheoryResult>& results) {
  std::string out =
      "statement                         trials  max_residual  tightness  "
      "status\n";
  char line[160];
  for (const auto& r : results) {
    std::snprintf(line, sizeof(line), "%-32s  %6d  %12.3e  %-9s  %s\n",
                  r.statement.c_str(), r.trials, r.max_residual,
                  r.tightness_witness ? "found" : "missing",
                  r.passed && r.tightness_witness ? "pass" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace fd2::theory
