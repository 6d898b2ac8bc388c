/* Copyright 2026 The pipemax-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "pipemax/cost_model.hpp"
#include "pipemax/scheduler.hpp"

namespace pipemax {

BatchIndices batch_indices(std::int64_t t, int n) {
  const auto mod = [n](std::int64_t v) {
    const std::int64_t r = v % n;
    return static_cast<int>(r < 0 ? r + n : r);
  };
  const int i = mod(t);
  return BatchIndices{i, mod(i + 1), mod(i - 1)};
}

std::vector<std::vector<RequestId>> initial_partition(std::span<const Request> requests, int n) {
  std::vector<std::vector<RequestId>> batches(static_cast<std::size_t>(n));
  if (requests.empty()) return batches;

  std::vector<const Request*> order;
  order.reserve(requests.size());
  for (const auto& r : requests) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const Request* a, const Request* b) {
    if (a->prefix_len() != b->prefix_len()) return a->prefix_len() > b->prefix_len();
    return a->id < b->id;
  });

  const auto m = static_cast<std::int64_t>(requests.size());
  const std::int64_t base = m / n;
  const std::int64_t extra = m % n;  // batches allowed to hold base + 1
  std::vector<Tokens> totals(static_cast<std::size_t>(n), 0);
  std::int64_t at_ceiling = 0;

  for (const Request* r : order) {
    int best = -1;
    for (int k = 0; k < n; ++k) {
      const auto size = static_cast<std::int64_t>(batches[static_cast<std::size_t>(k)].size());
      const bool full = size >= base + 1 || (size == base && at_ceiling >= extra);
      if (full) continue;
      if (best < 0 || totals[static_cast<std::size_t>(k)] < totals[static_cast<std::size_t>(best)]) {
        best = k;
      }
    }
    auto& batch = batches[static_cast<std::size_t>(best)];
    batch.push_back(r->id);
    totals[static_cast<std::size_t>(best)] += r->prefix_len();
    if (static_cast<std::int64_t>(batch.size()) == base + 1) ++at_ceiling;
  }
  for (auto& b : batches) std::sort(b.begin(), b.end());
  return batches;
}

Tokens prefetch_budget(double bandwidth, Seconds predicted_seconds, Bytes kv_bytes_per_token) {
  if (!(bandwidth > 0.0) || !(predicted_seconds > 0.0) || kv_bytes_per_token <= 0) return 0;
  constexpr Tokens kUnbounded = std::numeric_limits<Tokens>::max() / 4;
  const double tokens = bandwidth * predicted_seconds / static_cast<double>(kv_bytes_per_token);
  if (!std::isfinite(tokens) || tokens >= static_cast<double>(kUnbounded)) return kUnbounded;
  // Absorb representation error so exact products such as 20e9 * 0.05 floor
  // to the intended integer.
  return static_cast<Tokens>(std::floor(tokens * (1.0 + 1e-12)));
}

std::vector<RequestId> residual_set(std::span<const RequestId> next_batch,
                                    const std::set<RequestId>& gpu_resident) {
  std::vector<RequestId> out;
  for (RequestId id : next_batch) {
    if (gpu_resident.contains(id)) out.push_back(id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<RequestId> select_prefetch_warmup(std::span<const PoolEntry> pool, Tokens budget_tokens) {
  std::vector<PoolEntry> sorted(pool.begin(), pool.end());
  std::sort(sorted.begin(), sorted.end(), [](const PoolEntry& a, const PoolEntry& b) {
    if (a.prefix_len != b.prefix_len) return a.prefix_len < b.prefix_len;
    return a.id < b.id;
  });
  std::vector<RequestId> out;
  Tokens total = 0;
  for (const auto& e : sorted) {
    if (total + e.prefix_len > budget_tokens) break;
    total += e.prefix_len;
    out.push_back(e.id);
  }
  return out;
}

Seconds modeled_prefetch_time(const EstimatorParams& params, std::int64_t count, Tokens total_len) {
  return params.alpha * static_cast<double>(count) + params.beta * static_cast<double>(total_len);
}

namespace {

// Picks `size` items from `candidates` (indices into `items`, longest
// first) with total length at most `hi`; each pick is the longest remaining
// item within an equal share of the room left. Succeeds once the total
// reaches `lo`.
bool fill_group(const std::vector<PoolEntry>& items, std::span<const std::size_t> candidates, double lo,
                double hi, std::size_t size, std::vector<std::size_t>& chosen, Tokens& sum) {
  chosen.clear();
  sum = 0;
  if (size == 0 || size > candidates.size()) return false;
  auto it = candidates.begin();
  for (std::size_t left = size; left > 0; --left) {
    const double share = (hi - static_cast<double>(sum)) / static_cast<double>(left);
    it = std::partition_point(it, candidates.end(), [&](std::size_t c) {
      return static_cast<double>(items[c].prefix_len) > share;
    });
    if (candidates.end() - it < static_cast<std::ptrdiff_t>(left)) return false;
    chosen.push_back(*it);
    sum += items[*it].prefix_len;
    ++it;
  }
  return static_cast<double>(sum) >= lo;
}

// Longest-first scan of at most `max_scan` candidates: an item is taken when
// it keeps the sum within `hi`. Succeeds once the sum reaches `lo` with at
// least `min_count` items.
bool fill_scan(const std::vector<PoolEntry>& items, std::span<const std::size_t> candidates, double lo,
               double hi, std::size_t min_count, int max_scan, std::vector<std::size_t>& chosen, Tokens& sum) {
  chosen.clear();
  sum = 0;
  int scanned = 0;
  for (std::size_t idx : candidates) {
    if (scanned++ >= max_scan) break;
    const Tokens len = items[idx].prefix_len;
    if (static_cast<double>(sum + len) > hi) continue;
    chosen.push_back(idx);
    sum += len;
    if (static_cast<double>(sum) >= lo && chosen.size() >= min_count) return true;
  }
  return static_cast<double>(sum) >= lo && chosen.size() >= min_count;
}

// Exchange group sizes to try: a pair, and the size that moves the count
// to the gap-matching value.
std::array<std::size_t, 2> group_sizes(double wanted, std::size_t available) {
  const double cap = static_cast<double>(std::max<std::size_t>(available, 2));
  const double size = std::isfinite(wanted) ? std::clamp(std::round(wanted), 2.0, cap) : 2.0;
  return {2, static_cast<std::size_t>(size)};
}

}  // namespace

std::vector<RequestId> select_prefetch_steady(std::span<const PoolEntry> pool,
                                              const SteadySelectOptions& opts) {
  if (pool.empty() || opts.budget_tokens <= 0) return {};

  std::vector<PoolEntry> items(pool.begin(), pool.end());
  std::sort(items.begin(), items.end(), [](const PoolEntry& a, const PoolEntry& b) {
    if (a.prefix_len != b.prefix_len) return a.prefix_len > b.prefix_len;
    return a.id < b.id;
  });

  const auto budget = static_cast<double>(opts.budget_tokens);
  std::vector<char> selected(items.size(), 0);
  Tokens total = 0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (total + items[i].prefix_len <= opts.budget_tokens) {
      selected[i] = 1;
      total += items[i].prefix_len;
      ++count;
    }
  }

  const auto collect = [&] {
    std::vector<RequestId> out;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (selected[i]) out.push_back(items[i].id);
    }
    return out;
  };

  if (opts.gap_seconds <= 0.0) return collect();

  const double lo = std::min(opts.theta * budget, static_cast<double>(total));
  const auto& p = opts.params;
  // Request count whose modeled time equals the gap at total length `t`.
  const auto matching_count = [&](Tokens t) {
    return p.alpha > 0.0 ? (opts.gap_seconds - p.beta * static_cast<double>(t)) / p.alpha : 0.0;
  };
  std::vector<std::size_t> sel_idx;
  std::vector<std::size_t> unsel_idx;
  std::vector<std::size_t> chosen;

  for (int step = 0; step < opts.max_refine_steps; ++step) {
    const double err = std::abs(modeled_prefetch_time(p, count, total) - opts.gap_seconds);
    if (err <= opts.match_epsilon) break;
    const bool grow_count = modeled_prefetch_time(p, count, total) < opts.gap_seconds;

    sel_idx.clear();
    unsel_idx.clear();
    for (std::size_t i = 0; i < items.size(); ++i) (selected[i] ? sel_idx : unsel_idx).push_back(i);

    double best_err = err;
    std::size_t best_single = 0;
    std::vector<std::size_t> best_group;
    Tokens best_total = total;
    std::int64_t best_count = count;
    bool found = false;

    const auto consider = [&](std::size_t single, Tokens new_total, std::int64_t new_count) {
      const double e = std::abs(modeled_prefetch_time(p, new_count, new_total) - opts.gap_seconds);
      if (e < best_err) {
        best_err = e;
        best_single = single;
        best_group = chosen;
        best_total = new_total;
        best_count = new_count;
        found = true;
      }
    };

    if (grow_count) {
      // One selected long request -> several shorter unselected ones.
      int tried = 0;
      for (std::size_t r : sel_idx) {
        if (tried++ >= opts.max_candidates) break;
        const Tokens rest = total - items[r].prefix_len;
        const auto first_shorter = std::partition_point(
            unsel_idx.begin(), unsel_idx.end(),
            [&](std::size_t u) { return items[u].prefix_len >= items[r].prefix_len; });
        const auto shorter = std::span<const std::size_t>(unsel_idx).subspan(
            static_cast<std::size_t>(first_shorter - unsel_idx.begin()));
        Tokens add = 0;
        if (fill_scan(items, shorter, lo - static_cast<double>(rest), budget - static_cast<double>(rest), 2,
                      opts.max_fill_scan, chosen, add)) {
          consider(r, rest + add, count - 1 + static_cast<std::int64_t>(chosen.size()));
        }
        const auto sizes = group_sizes(matching_count(total) - static_cast<double>(count - 1), shorter.size());
        for (std::size_t s = 0; s < sizes.size(); ++s) {
          if (s > 0 && sizes[s] == sizes[0]) continue;
          if (!fill_group(items, shorter, lo - static_cast<double>(rest), budget - static_cast<double>(rest),
                          sizes[s], chosen, add)) {
            continue;
          }
          consider(r, rest + add, count - 1 + static_cast<std::int64_t>(chosen.size()));
        }
      }
      if (!found) break;
      selected[best_single] = 0;
      for (std::size_t u : best_group) selected[u] = 1;
    } else {
      // Several selected short requests -> one longer unselected request.
      int tried = 0;
      for (std::size_t r : unsel_idx) {
        const Tokens len = items[r].prefix_len;
        if (len > opts.budget_tokens) continue;
        if (tried++ >= opts.max_candidates) break;
        const auto first_shorter = std::partition_point(
            sel_idx.begin(), sel_idx.end(),
            [&](std::size_t s) { return items[s].prefix_len >= len; });
        const auto shorter = std::span<const std::size_t>(sel_idx).subspan(
            static_cast<std::size_t>(first_shorter - sel_idx.begin()));
        const double base = static_cast<double>(total + len);
        Tokens removed = 0;
        if (fill_scan(items, shorter, base - budget, base - lo, 2, opts.max_fill_scan, chosen, removed)) {
          consider(r, total + len - removed, count + 1 - static_cast<std::int64_t>(chosen.size()));
        }
        const auto sizes = group_sizes(static_cast<double>(count + 1) - matching_count(total), shorter.size());
        for (std::size_t s = 0; s < sizes.size(); ++s) {
          if (s > 0 && sizes[s] == sizes[0]) continue;
          if (!fill_group(items, shorter, base - budget, base - lo, sizes[s], chosen, removed)) continue;
          consider(r, total + len - removed, count + 1 - static_cast<std::int64_t>(chosen.size()));
        }
      }
      if (!found) break;
      selected[best_single] = 1;
      for (std::size_t s : best_group) selected[s] = 0;
    }
    total = best_total;
    count = best_count;
  }
  return collect();
}

bool detect_steady(std::span<const Tokens> budget_history, int window_w, double stability_threshold) {
  if (window_w < 2 || budget_history.size() < static_cast<std::size_t>(window_w)) return false;
  const auto window = budget_history.last(static_cast<std::size_t>(window_w));
  const auto [lo, hi] = std::minmax_element(window.begin(), window.end());
  if (*hi <= 0) return false;
  const double variation = static_cast<double>(*hi - *lo) / static_cast<double>(*hi);
  return variation <= stability_threshold;
}

}  // namespace pipemax
