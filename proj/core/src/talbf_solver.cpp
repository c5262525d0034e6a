#include "aegis/talbf_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace aegis::attacks {
namespace {

double place_value(unsigned bit, int bits) {
  const double p = std::ldexp(1.0, static_cast<int>(bit));
  return static_cast<int>(bit) == bits - 1 ? -p : p;
}

int stored_bit(std::int8_t code, unsigned bit) {
  return (static_cast<std::uint8_t>(code) >> bit) & 1U;
}

const std::vector<std::int8_t>& row_codes(const TalbfHead& h, std::size_t row) {
  return row == 0 ? h.codes_source : h.codes_target;
}

double row_bias(const TalbfHead& h, std::size_t row) {
  return row == 0 ? h.bias_source : h.bias_target;
}

double head_loss(double z_s, double z_t, double other, double quad, const TalbfHead& h,
                 double margin) {
  const double t1 = std::max(0.0, margin - (z_t - std::max(z_s, other)));
  const double t2 = std::max(0.0, margin - (std::max(z_t, other) - z_s));
  const double l2 = quad / h.l2_norm;
  return t1 + t2 + h.l2_weight * l2;
}

void validate(const TalbfProblem& p) {
  if (p.heads.empty()) throw std::invalid_argument("talbf: no heads");
  if (!(p.margin >= 0.0)) throw std::invalid_argument("talbf: negative margin");
  for (const auto& h : p.heads) {
    const std::size_t f = h.features();
    if (f == 0) throw std::invalid_argument("talbf: head without features");
    if (h.bits < 2 || h.bits > 8) throw std::invalid_argument("talbf: bit width out of range");
    if (h.codes_source.size() != f || h.codes_target.size() != f)
      throw std::invalid_argument("talbf: row size mismatch");
    if (h.gram.size() != f * f) throw std::invalid_argument("talbf: gram size mismatch");
    if (h.source == h.target) throw std::invalid_argument("talbf: source equals target");
    if (!(h.scale > 0.0)) throw std::invalid_argument("talbf: non-positive scale");
    if (!(h.l2_norm > 0.0)) throw std::invalid_argument("talbf: non-positive l2_norm");
  }
}

struct HeadState {
  std::vector<double> dw[2];
  std::vector<double> gdw[2];  // gram * dw
  double quad[2] = {0.0, 0.0};
  double z[2] = {0.0, 0.0};
};

class Search {
 public:
  explicit Search(const TalbfProblem& p) : p_(p) {
    offsets_.reserve(p.heads.size() + 1);
    std::size_t off = 0;
    for (const auto& h : p.heads) {
      offsets_.push_back(off);
      off += 2 * h.features() * static_cast<std::size_t>(h.bits);
    }
    offsets_.push_back(off);
    vars_.resize(off);
    for (std::size_t hi = 0; hi < p.heads.size(); ++hi) {
      const auto& h = p.heads[hi];
      const std::size_t f = h.features();
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < f; ++j)
          for (unsigned b = 0; b < static_cast<unsigned>(h.bits); ++b)
            vars_[index(hi, r, j, b)] = TalbfVar{hi, r, j, b};
    }
    reset();
  }

  std::size_t size() const { return vars_.size(); }
  const TalbfVar& var(std::size_t i) const { return vars_[i]; }

  std::size_t index(std::size_t head, std::size_t row, std::size_t j, unsigned bit) const {
    const auto& h = p_.heads[head];
    return offsets_[head] + (row * h.features() + j) * static_cast<std::size_t>(h.bits) + bit;
  }
  std::size_t index(const TalbfVar& v) const { return index(v.head, v.row, v.feature, v.bit); }

  void reset() {
    toggled_.assign(vars_.size(), 0);
    state_.assign(p_.heads.size(), HeadState{});
    losses_.assign(p_.heads.size(), 0.0);
    for (std::size_t hi = 0; hi < p_.heads.size(); ++hi) {
      const auto& h = p_.heads[hi];
      auto& s = state_[hi];
      for (std::size_t r = 0; r < 2; ++r) {
        s.dw[r].assign(h.features(), 0.0);
        s.gdw[r].assign(h.features(), 0.0);
        double z = row_bias(h, r);
        const auto& codes = row_codes(h, r);
        for (std::size_t j = 0; j < h.features(); ++j)
          z += static_cast<double>(codes[j]) * h.scale * h.x_features[j];
        s.z[r] = z;
      }
      losses_[hi] = head_loss(s.z[0], s.z[1], h.x_other_max, 0.0, h, p_.margin);
    }
    count_ = 0;
  }

  double total() const { return std::accumulate(losses_.begin(), losses_.end(), 0.0); }
  std::size_t count() const { return count_; }
  bool toggled(std::size_t i) const { return toggled_[i] != 0; }

  double delta(std::size_t i) const {
    const auto& v = vars_[i];
    const auto& h = p_.heads[v.head];
    const int b0 = stored_bit(row_codes(h, v.row)[v.feature], v.bit);
    const int cur = b0 ^ toggled_[i];
    return h.scale * place_value(v.bit, h.bits) * (1 - 2 * cur);
  }

  /// Total loss after toggling i.
  double eval(std::size_t i) const {
    const auto& v = vars_[i];
    const auto& h = p_.heads[v.head];
    const auto& s = state_[v.head];
    const double d = delta(i);
    double quad[2] = {s.quad[0], s.quad[1]};
    double z[2] = {s.z[0], s.z[1]};
    quad[v.row] += 2.0 * d * s.gdw[v.row][v.feature] +
                   d * d * h.gram[v.feature * h.features() + v.feature];
    z[v.row] += d * h.x_features[v.feature];
    const double hl = head_loss(z[0], z[1], h.x_other_max, quad[0] + quad[1], h, p_.margin);
    return total() - losses_[v.head] + hl;
  }

  /// Total loss after toggling both a and b (a != b).
  double eval_pair(std::size_t a, std::size_t b) const {
    const auto& va = vars_[a];
    const auto& vb = vars_[b];
    if (va.head != vb.head) return eval(a) + eval(b) - total();
    const auto& h = p_.heads[va.head];
    const auto& s = state_[va.head];
    const std::size_t f = h.features();
    const double da = delta(a);
    const double db = delta(b);
    double quad[2] = {s.quad[0], s.quad[1]};
    double z[2] = {s.z[0], s.z[1]};
    quad[va.row] += 2.0 * da * s.gdw[va.row][va.feature] + da * da * h.gram[va.feature * f + va.feature];
    z[va.row] += da * h.x_features[va.feature];
    double g = s.gdw[vb.row][vb.feature];
    if (va.row == vb.row) g += da * h.gram[vb.feature * f + va.feature];
    quad[vb.row] += 2.0 * db * g + db * db * h.gram[vb.feature * f + vb.feature];
    z[vb.row] += db * h.x_features[vb.feature];
    const double hl = head_loss(z[0], z[1], h.x_other_max, quad[0] + quad[1], h, p_.margin);
    return total() - losses_[va.head] + hl;
  }

  void apply(std::size_t i) {
    const auto& v = vars_[i];
    const auto& h = p_.heads[v.head];
    auto& s = state_[v.head];
    const std::size_t f = h.features();
    const double d = delta(i);
    s.quad[v.row] += 2.0 * d * s.gdw[v.row][v.feature] + d * d * h.gram[v.feature * f + v.feature];
    s.z[v.row] += d * h.x_features[v.feature];
    s.dw[v.row][v.feature] += d;
    for (std::size_t j = 0; j < f; ++j) s.gdw[v.row][j] += d * h.gram[j * f + v.feature];
    losses_[v.head] =
        head_loss(s.z[0], s.z[1], h.x_other_max, s.quad[0] + s.quad[1], h, p_.margin);
    toggled_[i] ^= 1;
    if (toggled_[i]) {
      ++count_;
    } else {
      --count_;
    }
  }

  std::vector<std::size_t> selected() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < toggled_.size(); ++i)
      if (toggled_[i]) out.push_back(i);
    return out;
  }

 private:
  const TalbfProblem& p_;
  std::vector<std::size_t> offsets_;
  std::vector<TalbfVar> vars_;
  std::vector<char> toggled_;
  std::vector<HeadState> state_;
  std::vector<double> losses_;
  std::size_t count_ = 0;
};

std::size_t subsets_up_to(std::size_t n, std::size_t k, std::size_t cap) {
  std::size_t total = 1, c = 1;
  for (std::size_t j = 1; j <= k && j <= n; ++j) {
    c = c * (n - j + 1) / j;
    total += c;
    if (total > cap) return cap + 1;
  }
  return total;
}

void enumerate(Search& s, std::size_t start, std::size_t left, double& best,
               std::vector<std::size_t>& pick, std::vector<std::size_t>& best_pick) {
  for (std::size_t i = start; i < s.size(); ++i) {
    s.apply(i);
    pick.push_back(i);
    if (s.total() < best - 1e-12) {
      best = s.total();
      best_pick = pick;
    }
    if (left > 1) enumerate(s, i + 1, left - 1, best, pick, best_pick);
    pick.pop_back();
    s.apply(i);
  }
}

bool improves(double candidate, double current) {
  return candidate < current - 1e-12 * std::max(1.0, std::abs(current));
}

void local_search(Search& s, std::size_t k, const TalbfSolverConfig& cfg) {
  const std::size_t n = s.size();
  const std::size_t max_rounds = 20 * k + 100;
  for (std::size_t round = 0; round < max_rounds; ++round) {
    const double cur = s.total();
    double best = cur;
    std::size_t pick_a = n;
    std::size_t pick_b = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (!s.toggled(i) && s.count() >= k) continue;
      const double v = s.eval(i);
      if (improves(v, best)) {
        best = v;
        pick_a = i;
      }
    }
    if (pick_a == n && s.count() > 0 && s.count() * n <= cfg.max_swap_evals) {
      const auto sel = s.selected();
      for (std::size_t a : sel) {
        for (std::size_t b = 0; b < n; ++b) {
          if (s.toggled(b)) continue;
          const double v = s.eval_pair(a, b);
          if (improves(v, best)) {
            best = v;
            pick_a = a;
            pick_b = b;
          }
        }
      }
    }
    if (pick_a == n) return;
    s.apply(pick_a);
    if (pick_b != n) s.apply(pick_b);
  }
}

/// Euclidean projection onto {d in [0,1]^n : sum d <= k}.
void project_capped(std::vector<double>& d, double k) {
  double sum = 0.0;
  for (auto& v : d) {
    v = std::clamp(v, 0.0, 1.0);
    sum += v;
  }
  if (sum <= k) return;
  double lo = 0.0;
  double hi = *std::max_element(d.begin(), d.end());
  const auto mass = [&](double theta) {
    double m = 0.0;
    for (double v : d) m += std::clamp(v - theta, 0.0, 1.0);
    return m;
  };
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mass(mid) > k) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  for (auto& v : d) v = std::clamp(v - hi, 0.0, 1.0);
}

std::vector<double> relax(const TalbfProblem& p, const Search& s, std::size_t k,
                          const TalbfSolverConfig& cfg) {
  const std::size_t n = s.size();
  std::vector<double> d(n, 0.0);
  std::vector<double> g(n, 0.0);
  std::vector<double> sign(n);      // d(dw)/d(d) = scale * place * (1 - 2 b0)
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = s.var(i);
    const auto& h = p.heads[v.head];
    const int b0 = stored_bit(row_codes(h, v.row)[v.feature], v.bit);
    sign[i] = h.scale * place_value(v.bit, h.bits) * (1 - 2 * b0);
  }
  std::vector<std::vector<double>> dw(p.heads.size());
  for (std::size_t it = 0; it < cfg.relax_iters; ++it) {
    for (std::size_t hi = 0; hi < p.heads.size(); ++hi)
      dw[hi].assign(2 * p.heads[hi].features(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (d[i] == 0.0) continue;
      const auto& v = s.var(i);
      dw[v.head][v.row * p.heads[v.head].features() + v.feature] += sign[i] * d[i];
    }
    std::size_t gi = 0;
    for (std::size_t hi = 0; hi < p.heads.size(); ++hi) {
      const auto& h = p.heads[hi];
      const std::size_t f = h.features();
      double z[2];
      for (std::size_t r = 0; r < 2; ++r) {
        z[r] = row_bias(h, r);
        const auto& codes = row_codes(h, r);
        for (std::size_t j = 0; j < f; ++j)
          z[r] += (static_cast<double>(codes[j]) * h.scale + dw[hi][r * f + j]) * h.x_features[j];
      }
      double dz[2] = {0.0, 0.0};
      const double other = h.x_other_max;
      if (p.margin - (z[1] - std::max(z[0], other)) > 0.0) {
        dz[1] -= 1.0;
        if (z[0] >= other) dz[0] += 1.0;
      }
      if (p.margin - (std::max(z[1], other) - z[0]) > 0.0) {
        dz[0] += 1.0;
        if (z[1] >= other) dz[1] -= 1.0;
      }
      const double l2s = 2.0 * h.l2_weight / h.l2_norm;
      for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t j = 0; j < f; ++j) {
          double gw = dz[r] * h.x_features[j];
          if (l2s != 0.0) {
            double gd = 0.0;
            for (std::size_t q = 0; q < f; ++q) gd += h.gram[j * f + q] * dw[hi][r * f + q];
            gw += l2s * gd;
          }
          for (unsigned b = 0; b < static_cast<unsigned>(h.bits); ++b, ++gi)
            g[gi] = gw * sign[gi];
        }
      }
    }
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax == 0.0) break;
    for (std::size_t i = 0; i < n; ++i) d[i] -= cfg.relax_step * g[i] / gmax;
    project_capped(d, static_cast<double>(k));
  }
  return d;
}

}  // namespace

std::vector<double> gram_matrix(std::span<const std::vector<double>> aux) {
  if (aux.empty()) return {};
  const std::size_t f = aux.front().size();
  std::vector<double> g(f * f, 0.0);
  for (const auto& a : aux) {
    if (a.size() != f) throw std::invalid_argument("gram_matrix: ragged features");
    for (std::size_t i = 0; i < f; ++i) {
      if (a[i] == 0.0) continue;
      for (std::size_t j = 0; j < f; ++j) g[i * f + j] += a[i] * a[j];
    }
  }
  return g;
}

double talbf_objective(const TalbfProblem& p, std::span<const TalbfVar> toggles) {
  validate(p);
  Search s(p);
  for (const auto& v : toggles) s.apply(s.index(v));
  return s.total();
}

bool talbf_success(const TalbfProblem& p, std::span<const TalbfVar> toggles) {
  validate(p);
  std::vector<std::vector<std::int8_t>> rows[2];
  for (const auto& h : p.heads) {
    rows[0].push_back(h.codes_source);
    rows[1].push_back(h.codes_target);
  }
  for (const auto& v : toggles) {
    auto& c = rows[v.row][v.head][v.feature];
    c = static_cast<std::int8_t>(static_cast<std::uint8_t>(c) ^ (1U << v.bit));
  }
  for (std::size_t hi = 0; hi < p.heads.size(); ++hi) {
    const auto& h = p.heads[hi];
    double z[2];
    for (std::size_t r = 0; r < 2; ++r) {
      z[r] = row_bias(h, r);
      for (std::size_t j = 0; j < h.features(); ++j) {
        // sign-extend codes narrower than 8 bits
        int code = static_cast<std::uint8_t>(rows[r][hi][j]) & ((1 << h.bits) - 1);
        if (code & (1 << (h.bits - 1))) code -= 1 << h.bits;
        z[r] += static_cast<double>(code) * h.scale * h.x_features[j];
      }
    }
    if (!(z[1] > std::max(z[0], h.x_other_max))) return false;
  }
  return true;
}

TalbfSolution solve_talbf(const TalbfProblem& p, std::size_t k, const TalbfSolverConfig& cfg) {
  validate(p);
  Search s(p);
  TalbfSolution best;
  best.loss = s.total();
  if (k == 0) {
    best.success = talbf_success(p, {});
    return best;
  }

  const auto finish = [&](Search& st) {
    TalbfSolution sol;
    for (std::size_t i : st.selected()) sol.toggles.push_back(st.var(i));
    std::sort(sol.toggles.begin(), sol.toggles.end());
    sol.loss = st.total();
    return sol;
  };

  if (subsets_up_to(s.size(), k, cfg.max_exhaustive_evals) <= cfg.max_exhaustive_evals) {
    double loss = s.total();
    std::vector<std::size_t> pick, chosen;
    enumerate(s, 0, k, loss, pick, chosen);
    s.reset();
    for (std::size_t i : chosen) s.apply(i);
    best = finish(s);
    best.success = talbf_success(p, best.toggles);
    return best;
  }

  std::vector<double> d = relax(p, s, k, cfg);
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });
  for (std::size_t r = 0; r < order.size() && r < k && d[order[r]] > 0.5; ++r) s.apply(order[r]);
  local_search(s, k, cfg);
  TalbfSolution a = finish(s);

  s.reset();
  local_search(s, k, cfg);
  TalbfSolution b = finish(s);

  best = (b.loss < a.loss - 1e-12) ? std::move(b) : std::move(a);
  best.success = talbf_success(p, best.toggles);
  return best;
}

}  // namespace aegis::attacks
