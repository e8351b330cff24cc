#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>

#include "wsd/rng.hpp"

namespace oracle {

Vec ref_matmul(const Vec& a, int64_t m, int64_t p, const Vec& b, int64_t q) {
  Vec c(static_cast<size_t>(m * q), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t k = 0; k < p; ++k) {
      const double aik = a[static_cast<size_t>(i * p + k)];
      for (int64_t j = 0; j < q; ++j) {
        c[static_cast<size_t>(i * q + j)] += aik * b[static_cast<size_t>(k * q + j)];
      }
    }
  }
  return c;
}

Vec ref_transpose(const Vec& a, int64_t m, int64_t n) {
  Vec t(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      t[static_cast<size_t>(j * m + i)] = a[static_cast<size_t>(i * n + j)];
    }
  }
  return t;
}

void ref_softmax_rows(Vec& a, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    double* x = a.data() + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      x[j] = std::exp(x[j] - mx);
      s += x[j];
    }
    for (int64_t j = 0; j < cols; ++j) x[j] /= s;
  }
}

Vec dense_attention(const Vec& q, const Vec& k, const Vec& v, int64_t m, int64_t dk, int64_t dv,
                    const Vec& w, int64_t f_out, const Vec& bias) {
  Vec logits = ref_matmul(q, m, dk, ref_transpose(k, m, dk), m);
  ref_softmax_rows(logits, m, m);
  Vec ctx = ref_matmul(logits, m, m, v, dv);
  Vec out = ref_matmul(ctx, m, dv, w, f_out);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < f_out; ++j) out[static_cast<size_t>(i * f_out + j)] += bias[static_cast<size_t>(j)];
  }
  return out;
}

Vec svd_pinv(Vec a, int64_t m, int64_t n, double rcond) {
  // One-sided Jacobi: orthogonalize columns of a, accumulating V.
  Vec v(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i * n + i)] = 1.0;
  const double eps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (int64_t p = 0; p < n - 1; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (int64_t i = 0; i < m; ++i) {
          const double ap = a[static_cast<size_t>(i * n + p)];
          const double aq = a[static_cast<size_t>(i * n + q)];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        off = std::max(off, std::abs(gamma) / std::max(std::sqrt(alpha * beta), 1e-300));
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (int64_t i = 0; i < m; ++i) {
          const double ap = a[static_cast<size_t>(i * n + p)];
          const double aq = a[static_cast<size_t>(i * n + q)];
          a[static_cast<size_t>(i * n + p)] = c * ap - s * aq;
          a[static_cast<size_t>(i * n + q)] = s * ap + c * aq;
        }
        for (int64_t i = 0; i < n; ++i) {
          const double vp = v[static_cast<size_t>(i * n + p)];
          const double vq = v[static_cast<size_t>(i * n + q)];
          v[static_cast<size_t>(i * n + p)] = c * vp - s * vq;
          v[static_cast<size_t>(i * n + q)] = s * vp + c * vq;
        }
      }
    }
    if (off < 1e-14) break;
  }
  Vec sigma(static_cast<size_t>(n), 0.0);
  double smax = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double x = a[static_cast<size_t>(i * n + j)];
      s += x * x;
    }
    sigma[static_cast<size_t>(j)] = std::sqrt(s);
    smax = std::max(smax, sigma[static_cast<size_t>(j)]);
  }
  // pinv = V diag(1/sigma) U^T, with U column j = a_j / sigma_j.
  Vec pinv(static_cast<size_t>(n * m), 0.0);
  for (int64_t j = 0; j < n; ++j) {
    const double sj = sigma[static_cast<size_t>(j)];
    if (sj <= rcond * smax) continue;
    const double inv = 1.0 / (sj * sj);  // combines 1/sigma with un-normalized U
    for (int64_t r = 0; r < n; ++r) {
      const double vr = v[static_cast<size_t>(r * n + j)] * inv;
      if (vr == 0.0) continue;
      for (int64_t i = 0; i < m; ++i) {
        pinv[static_cast<size_t>(r * m + i)] += vr * a[static_cast<size_t>(i * n + j)];
      }
    }
  }
  return pinv;
}

double pair_count_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs++;
      if (scores[i] > scores[j]) {
        wins += 1.0;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / static_cast<double>(pairs);
}

double fd_derivative(wsd::Tensor& param, int64_t idx, const std::function<double()>& f,
                     double step) {
  double* d = param.data();
  const double saved = d[idx];
  d[idx] = saved + step;
  const double fp = f();
  d[idx] = saved - step;
  const double fm = f();
  d[idx] = saved;
  return (fp - fm) / (2.0 * step);
}

double rel_err(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

GradCheck check_grads(std::vector<std::pair<std::string, wsd::Tensor>> params,
                      const std::function<double()>& f, double step, int64_t max_coords_per_param,
                      uint64_t coord_seed) {
  GradCheck res;
  wsd::Rng rng(coord_seed == 0 ? 1234567ULL : coord_seed);
  for (auto& [name, p] : params) {
    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_param < 0 || n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all);
      coords.assign(all.begin(), all.begin() + max_coords_per_param);
    }
    const auto& g = p.grad();
    for (int64_t idx : coords) {
      const double numeric = fd_derivative(p, idx, f, step);
      const double analytic = g[static_cast<size_t>(idx)];
      const double err = rel_err(analytic, numeric);
      if (err > res.max_err) {
        res.max_err = err;
        res.worst = name + "[" + std::to_string(idx) + "]";
      }
    }
  }
  return res;
}

}  // namespace oracle
