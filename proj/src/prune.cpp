#include "pqd/prune.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#include "pqd/errors.hpp"

namespace pqd {

BitMask::BitMask(std::int64_t n, bool value) : n_(n) {
  words_.assign(static_cast<std::size_t>((n + 63) / 64), value ? ~std::uint64_t(0) : 0);
  if (value && (n & 63)) words_.back() >>= (64 - (n & 63));  // clear slack bits
}

std::int64_t BitMask::popcount() const {
  std::int64_t c = 0;
  for (std::uint64_t w : words_) c += std::popcount(w);
  return c;
}

std::int64_t PruneMask::total_bits() const {
  std::int64_t n = 0;
  for (const BitMask& m : per_param) n += m.size();
  return n;
}

std::int64_t PruneMask::popcount() const {
  std::int64_t c = 0;
  for (const BitMask& m : per_param) c += m.popcount();
  return c;
}

float PruneMask::achieved_sparsity() const {
  const std::int64_t n = total_bits();
  if (n == 0) return 0.0f;
  return 1.0f - static_cast<float>(popcount()) / static_cast<float>(n);
}

GlobalThreshold compute_global_threshold(const std::vector<Parameter>& params, float rho) {
  if (rho < 0.0f || rho >= 1.0f) throw ConfigError("sparsity must lie in [0, 1)");
  std::vector<float> mags;
  for (const Parameter& p : params) {
    if (!p.maskable) continue;
    for (std::int64_t i = 0; i < p.value.size(); ++i) mags.push_back(std::fabs(p.value[i]));
  }
  if (mags.empty()) throw ConfigError("no maskable parameters");
  GlobalThreshold th;
  th.total = static_cast<std::int64_t>(mags.size());
  const auto drop = static_cast<std::int64_t>(std::ceil(static_cast<double>(rho) * th.total));
  th.keep_count = th.total - drop;
  if (drop == 0) {
    th.gamma = 0.0f;
    return th;
  }
  if (th.keep_count == 0) {
    // Nothing survives; any threshold above the largest magnitude works.
    th.gamma = std::nextafter(*std::max_element(mags.begin(), mags.end()),
                              std::numeric_limits<float>::infinity());
    return th;
  }
  // gamma = smallest kept magnitude = element at rank `drop` (0-based) of the
  // ascending pooled magnitudes.
  std::nth_element(mags.begin(), mags.begin() + drop, mags.end());
  th.gamma = mags[static_cast<std::size_t>(drop)];
  return th;
}

namespace {

PruneMask threshold_mask(const std::vector<Parameter>& params, float gamma, float rho,
                         std::int64_t keep_budget /* <0: unbounded */) {
  if (gamma < 0.0f) throw ConfigError("threshold must be non-negative");
  PruneMask mask;
  mask.rho = rho;
  mask.gamma = gamma;
  mask.per_param.resize(params.size());
  std::int64_t kept_at_gamma = 0;
  std::int64_t above = 0;
  if (keep_budget >= 0) {
    for (const Parameter& p : params) {
      if (!p.maskable) continue;
      for (std::int64_t i = 0; i < p.value.size(); ++i)
        if (std::fabs(p.value[i]) > gamma) ++above;
    }
  }
  const std::int64_t gamma_budget = keep_budget >= 0 ? keep_budget - above : -1;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const Parameter& p = params[pi];
    if (!p.maskable) continue;
    BitMask m(p.value.size());
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      const float a = std::fabs(p.value[i]);
      if (a > gamma) {
        m.set(i, true);
      } else if (a == gamma) {
        if (keep_budget < 0) {
          m.set(i, true);
        } else if (kept_at_gamma < gamma_budget) {
          m.set(i, true);
          ++kept_at_gamma;
        }
      }
    }
    mask.per_param[pi] = std::move(m);
  }
  return mask;
}

}  // namespace

PruneMask build_mask(const std::vector<Parameter>& params, float gamma) {
  return threshold_mask(params, gamma, 0.0f, -1);
}

PruneMask build_mask(const std::vector<Parameter>& params, const GlobalThreshold& th, float rho) {
  return threshold_mask(params, th.gamma, rho, th.keep_count);
}

void apply_mask(std::vector<Parameter>& params, const PruneMask& mask) {
  if (mask.per_param.size() != params.size())
    throw InvariantError("mask count " + std::to_string(mask.per_param.size()) +
                         " does not match parameter count " + std::to_string(params.size()));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const BitMask& m = mask.per_param[pi];
    if (m.empty()) continue;
    Parameter& p = params[pi];
    if (m.size() != p.value.size())
      throw InvariantError("mask size " + std::to_string(m.size()) + " does not match parameter " +
                           p.name + " size " + std::to_string(p.value.size()));
    for (std::int64_t i = 0; i < p.value.size(); ++i)
      if (!m.get(i)) p.value[i] = 0.0f;
  }
}

SaliencyReport taylor_saliency(const std::vector<Parameter>& params) {
  SaliencyReport rep;
  std::vector<float> pooled;
  bool any_grad = false;
  for (const Parameter& p : params) {
    if (!p.maskable) continue;
    if (p.grad.size() != p.value.size())
      throw InvariantError("saliency: gradients not populated for " + p.name);
    std::vector<float> scores(static_cast<std::size_t>(p.value.size()));
    for (std::int64_t i = 0; i < p.value.size(); ++i) {
      scores[static_cast<std::size_t>(i)] = std::fabs(p.grad[i] * p.value[i]);
      if (p.grad[i] != 0.0f) any_grad = true;
    }
    pooled.insert(pooled.end(), scores.begin(), scores.end());
    rep.scores.push_back(std::move(scores));
  }
  if (pooled.empty()) throw ConfigError("no maskable parameters");
  if (!any_grad) throw InvariantError("saliency: gradients not populated (all zero)");
  rep.count = static_cast<std::int64_t>(pooled.size());
  std::sort(pooled.begin(), pooled.end());
  auto quantile = [&](double q) {
    const auto idx = static_cast<std::size_t>(q * static_cast<double>(pooled.size() - 1));
    return pooled[idx];
  };
  rep.q25 = quantile(0.25);
  rep.q50 = quantile(0.50);
  rep.q75 = quantile(0.75);
  return rep;
}

}  // namespace pqd
