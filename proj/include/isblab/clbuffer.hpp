#pragma once

// Contrastive-Learning Buffer. Tracked states from the latest rollout are
// ranked by how much one policy-gradient step changed their value; the top
// and bottom ranks become positives and negatives for a soft-nearest-neighbor
// loss that shapes an embedding network, and initial states are then chosen
// by spherical K-means in that embedding space.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "isblab/isb.hpp"

namespace isblab {

enum class DeltaVAggregation { Mean, Last, Sum };

inline DeltaVAggregation parse_aggregation(const std::string& s) {
  if (s == "mean") return DeltaVAggregation::Mean;
  if (s == "last") return DeltaVAggregation::Last;
  if (s == "sum") return DeltaVAggregation::Sum;
  throw ConfigError("unknown delta-v aggregation '" + s + "' (expected mean, last or sum)");
}

inline const char* aggregation_name(DeltaVAggregation a) {
  return a == DeltaVAggregation::Mean ? "mean" : a == DeltaVAggregation::Last ? "last" : "sum";
}

struct ContrastiveConfig {
  int top_k = 16;
  double temperature = 0.1;
  int embedding_dim = 32;
  int train_steps_per_update = 8;
  int tracked_count = 128;
  std::vector<Eigen::Index> hidden = {64, 64};
  double learning_rate = 1e-3;
  DeltaVAggregation aggregation = DeltaVAggregation::Mean;

  void validate() const {
    if (top_k < 1 || embedding_dim < 1 || tracked_count < 1 || train_steps_per_update < 0)
      throw ConfigError("contrastive top_k, embedding_dim and tracked_count must be positive");
    if (top_k > tracked_count / 2) throw ConfigError("contrastive top_k must not exceed tracked_count / 2");
    if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("contrastive learning rate must be positive");
  }
};

struct TrackedState {
  StateRecord record;
  // Flat batch indices [begin, end): the record's own step through its
  // episode's done flag or the end of the rollout.
  std::size_t begin = 0;
  std::size_t end = 0;
  bool ends_in_done = false;
  double delta_v = 0.0;
  bool degenerate = false;
};

/// Uniformly picks `count` buffered records that came from this batch and
/// attaches their trajectory tails. Fewer qualifying records: all of them.
inline std::vector<TrackedState> track_states(const VisitedStatesBuffer& buf, const RolloutBatch& batch,
                                              std::size_t count, Rng& rng) {
  std::vector<std::size_t> qualifying;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const StateRecord& r = buf[i];
    if (r.iteration == batch.iteration && r.lane >= 0 && r.lane < batch.num_lanes && r.step >= 0 && r.step < batch.steps)
      qualifying.push_back(i);
  }
  std::vector<std::size_t> chosen;
  if (count >= qualifying.size()) {
    chosen = qualifying;
  } else {
    std::sample(qualifying.begin(), qualifying.end(), std::back_inserter(chosen), static_cast<std::ptrdiff_t>(count), rng);
  }
  std::vector<TrackedState> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) {
    TrackedState ts;
    ts.record = buf[i];
    ts.begin = batch.index(ts.record.lane, ts.record.step);
    const std::size_t lane_end = batch.index(ts.record.lane, 0) + static_cast<std::size_t>(batch.steps);
    std::size_t e = ts.begin;
    while (e < lane_end) {
      if (batch.dones[e]) {
        ts.ends_in_done = true;
        ++e;
        break;
      }
      ++e;
    }
    ts.end = e;
    out.push_back(std::move(ts));
  }
  return out;
}

struct DeltaVEstimate {
  double value = 0.0;
  bool degenerate = false;
};

/// Value change at the tail's first state, V_after(s) - [V_after(s) + A_GAE(s)],
/// i.e. minus the GAE advantage of the rollout tail under the updated value
/// function. At lambda = 1 this is V_after(s) minus the sampled discounted
/// return, whose expectation over the old policy's rollouts is V_new(s) - V_old(s).
inline DeltaVEstimate delta_v_from_values(std::span<const double> rewards, std::span<const double> values_after,
                                          bool ends_in_done, double bootstrap_after, const GaeConfig& cfg) {
  if (rewards.empty()) return {0.0, true};
  std::vector<std::uint8_t> dones(rewards.size(), 0);
  if (ends_in_done) dones.back() = 1;
  const GaeResult g = compute_gae(rewards, values_after, dones, ends_in_done ? 0.0 : bootstrap_after, cfg);
  return {-g.advantages.front(), false};
}

inline DeltaVEstimate estimate_delta_v(const TrackedState& ts, const MlpParams& value_net_after, const RolloutBatch& b,
                                       const GaeConfig& cfg) {
  if (ts.end <= ts.begin) return {0.0, true};
  const auto len = static_cast<Eigen::Index>(ts.end - ts.begin);
  const Mat obs = b.observations.middleCols(static_cast<Eigen::Index>(ts.begin), len);
  const Mat v = mlp_forward_batch(value_net_after, obs);
  std::vector<double> values(v.data(), v.data() + v.size());
  double boot = 0.0;
  if (!ts.ends_in_done) boot = mlp_forward(value_net_after, b.final_observations.col(ts.record.lane))(0);
  return delta_v_from_values(std::span(b.rewards).subspan(ts.begin, ts.end - ts.begin), values, ts.ends_in_done, boot, cfg);
}

/// Deduplicated observations covering every tracked tail (plus bootstrap
/// states), so one value-net pass per gradient step serves all estimates.
struct TailIndex {
  Mat observations;
  std::vector<std::vector<Eigen::Index>> columns;  // per tracked state, per tail step
  std::vector<Eigen::Index> bootstrap_column;      // -1 when the tail ends in a done
};

inline TailIndex build_tail_index(const std::vector<TrackedState>& tracked, const RolloutBatch& b) {
  TailIndex ti;
  std::vector<Eigen::Index> col_of_sample(b.size(), -1);
  std::vector<Eigen::Index> col_of_final(static_cast<std::size_t>(b.num_lanes), -1);
  std::vector<Vec> cols;
  for (const TrackedState& ts : tracked) {
    std::vector<Eigen::Index> c;
    for (std::size_t i = ts.begin; i < ts.end; ++i) {
      if (col_of_sample[i] < 0) {
        col_of_sample[i] = static_cast<Eigen::Index>(cols.size());
        cols.push_back(b.observations.col(static_cast<Eigen::Index>(i)));
      }
      c.push_back(col_of_sample[i]);
    }
    ti.columns.push_back(std::move(c));
    Eigen::Index bc = -1;
    if (!ts.ends_in_done) {
      auto& slot = col_of_final[static_cast<std::size_t>(ts.record.lane)];
      if (slot < 0) {
        slot = static_cast<Eigen::Index>(cols.size());
        cols.push_back(b.final_observations.col(ts.record.lane));
      }
      bc = slot;
    }
    ti.bootstrap_column.push_back(bc);
  }
  if (!cols.empty()) {
    ti.observations.resize(cols.front().size(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) ti.observations.col(static_cast<Eigen::Index>(k)) = cols[k];
  }
  return ti;
}

/// Per-tracked estimates from one value-network snapshot over TailIndex::observations.
inline std::vector<DeltaVEstimate> delta_v_from_snapshot(const std::vector<TrackedState>& tracked, const TailIndex& ti,
                                                         const Vec& snapshot, const RolloutBatch& b,
                                                         const GaeConfig& cfg) {
  std::vector<DeltaVEstimate> out;
  out.reserve(tracked.size());
  for (std::size_t k = 0; k < tracked.size(); ++k) {
    const TrackedState& ts = tracked[k];
    std::vector<double> values;
    values.reserve(ti.columns[k].size());
    for (Eigen::Index c : ti.columns[k]) values.push_back(snapshot(c));
    const double boot = ti.bootstrap_column[k] >= 0 ? snapshot(ti.bootstrap_column[k]) : 0.0;
    out.push_back(delta_v_from_values(std::span(b.rewards).subspan(ts.begin, ts.end - ts.begin), values,
                                      ts.ends_in_done, boot, cfg));
  }
  return out;
}

/// Folds per-gradient-step estimates into TrackedState::delta_v.
inline void aggregate_delta_v(std::vector<TrackedState>& tracked,
                              const std::vector<std::vector<DeltaVEstimate>>& per_step, DeltaVAggregation how) {
  for (std::size_t k = 0; k < tracked.size(); ++k) {
    double acc = 0.0;
    bool degenerate = false;
    for (const auto& step : per_step) {
      degenerate = degenerate || step[k].degenerate;
      acc = how == DeltaVAggregation::Last ? step[k].value : acc + step[k].value;
    }
    if (how == DeltaVAggregation::Mean && !per_step.empty()) acc /= static_cast<double>(per_step.size());
    tracked[k].delta_v = acc;
    tracked[k].degenerate = degenerate;
  }
}

struct PosNeg {
  std::vector<std::size_t> positive;  // highest delta_v first
  std::vector<std::size_t> negative;  // lowest delta_v first
  int k = 0;
  bool reduced = false;  // k was cut to floor(n / 2)
};

/// Top-k and bottom-k indices; a later index counts as more recent and wins ties.
inline PosNeg build_pos_neg(const std::vector<double>& delta_v, int top_k) {
  PosNeg pn;
  const int n = static_cast<int>(delta_v.size());
  pn.k = top_k;
  if (2 * top_k > n) {
    pn.k = n / 2;
    pn.reduced = true;
  }
  std::vector<std::size_t> desc(delta_v.size()), asc(delta_v.size());
  std::iota(desc.begin(), desc.end(), std::size_t{0});
  std::iota(asc.begin(), asc.end(), std::size_t{0});
  std::stable_sort(desc.begin(), desc.end(), [&](std::size_t a, std::size_t b) {
    if (delta_v[a] != delta_v[b]) return delta_v[a] > delta_v[b];
    return a > b;
  });
  std::stable_sort(asc.begin(), asc.end(), [&](std::size_t a, std::size_t b) {
    if (delta_v[a] != delta_v[b]) return delta_v[a] < delta_v[b];
    return a > b;
  });
  pn.positive.assign(desc.begin(), desc.begin() + pn.k);
  pn.negative.assign(asc.begin(), asc.begin() + pn.k);
  return pn;
}

inline PosNeg build_pos_neg(const std::vector<TrackedState>& tracked, int top_k) {
  std::vector<double> dv;
  dv.reserve(tracked.size());
  for (const TrackedState& t : tracked) dv.push_back(t.delta_v);
  return build_pos_neg(dv, top_k);
}

// ---------------------------------------------------------------------------
// Soft-nearest-neighbor loss

/// -log( sum_P exp(-d/T) / sum_{P and N} exp(-d/T) ) from anchor distances.
inline double snn_loss_from_distances(const std::vector<double>& positive, const std::vector<double>& negative,
                                      double temperature) {
  if (positive.empty()) throw DegenerateInput("soft-nearest-neighbor loss needs at least one positive besides the anchor");
  double mx = -std::numeric_limits<double>::infinity();
  for (double d : positive) mx = std::max(mx, -d / temperature);
  for (double d : negative) mx = std::max(mx, -d / temperature);
  double num = 0.0, den = 0.0;
  for (double d : positive) num += std::exp(-d / temperature - mx);
  den = num;
  for (double d : negative) den += std::exp(-d / temperature - mx);
  return -std::log(num) + std::log(den);
}

struct ContrastiveLoss {
  double loss = 0.0;
  MlpGrad grad;
  std::size_t numerator_terms = 0;    // |P| - 1
  std::size_t denominator_terms = 0;  // |P| - 1 + |N|
};

/// Loss and parameter gradient for anchor P[anchor] (columns of `positives`)
/// against the other positives and all negatives; g is cosine distance.
inline ContrastiveLoss contrastive_loss(const MlpParams& net, std::size_t anchor, const Mat& positives,
                                        const Mat& negatives, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("contrastive_loss: temperature must be positive");
  const Eigen::Index np = positives.cols(), nn = negatives.cols();
  if (anchor >= static_cast<std::size_t>(np)) throw std::out_of_range("contrastive_loss: anchor not in the positive set");
  if (np < 2) throw DegenerateInput("contrastive_loss: positive set needs a member besides the anchor");

  Mat inputs(positives.rows(), np + nn);
  inputs << positives, negatives;
  const ForwardCache cache = mlp_forward_cached(net, inputs);
  const Mat& x = cache.output();
  const auto a = static_cast<Eigen::Index>(anchor);

  Vec norms(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    norms(c) = x.col(c).norm();
    if (!(norms(c) > 1e-12)) throw NumericError("contrastive_loss: zero-norm embedding at column " + std::to_string(c));
  }

  // Logits z_k = -g(x_a, x_k) / T over every column except the anchor.
  std::vector<Eigen::Index> cols;
  std::vector<double> cosv, z;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    if (c == a) continue;
    const double cs = x.col(a).dot(x.col(c)) / (norms(a) * norms(c));
    cols.push_back(c);
    cosv.push_back(cs);
    z.push_back(-(1.0 - cs) / temperature);
  }
  const std::size_t n_pos = static_cast<std::size_t>(np - 1);
  const double mx = *std::max_element(z.begin(), z.end());
  double num = 0.0, den = 0.0;
  std::vector<double> e(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    e[k] = std::exp(z[k] - mx);
    den += e[k];
    if (k < n_pos) num += e[k];
  }

  ContrastiveLoss out;
  out.loss = -std::log(num) + std::log(den);
  out.numerator_terms = n_pos;
  out.denominator_terms = z.size();
  if (!std::isfinite(out.loss)) throw NumericError("contrastive_loss: non-finite loss");

  // dL/dz_k = softmax_all(k) - [k in P'] softmax_P'(k); z = (cos - 1) / T.
  Mat dx = Mat::Zero(x.rows(), x.cols());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double dz = e[k] / den - (k < n_pos ? e[k] / num : 0.0);
    const double dcos = dz / temperature;
    const Eigen::Index c = cols[k];
    const double inv = 1.0 / (norms(a) * norms(c));
    dx.col(a) += dcos * (x.col(c) * inv - cosv[k] * x.col(a) / (norms(a) * norms(a)));
    dx.col(c) += dcos * (x.col(a) * inv - cosv[k] * x.col(c) / (norms(c) * norms(c)));
  }
  out.grad = mlp_backward_batch(net, cache, dx).grad;
  return out;
}

inline MlpParams make_embedding_net(Eigen::Index obs_dim, const ContrastiveConfig& cfg, Rng& rng) {
  return make_mlp(obs_dim, cfg.hidden, cfg.embedding_dim, rng);
}

struct EmbeddingTrainResult {
  MlpParams net;
  AdamState opt;
  std::vector<double> losses;
  PosNeg sets;
};

/// cfg.train_steps_per_update Adam steps, each against a fresh anchor drawn uniformly from P.
inline EmbeddingTrainResult train_embedding(MlpParams net, const std::vector<TrackedState>& tracked,
                                            const ContrastiveConfig& cfg, AdamState opt, Rng& rng) {
  EmbeddingTrainResult res;
  res.sets = build_pos_neg(tracked, cfg.top_k);
  if (cfg.train_steps_per_update > 0 && res.sets.k >= 2) {
    const Eigen::Index d = tracked.front().record.observation.size();
    Mat pos(d, res.sets.k), neg(d, res.sets.k);
    for (int i = 0; i < res.sets.k; ++i) {
      pos.col(i) = tracked[res.sets.positive[static_cast<std::size_t>(i)]].record.observation;
      neg.col(i) = tracked[res.sets.negative[static_cast<std::size_t>(i)]].record.observation;
    }
    for (int s = 0; s < cfg.train_steps_per_update; ++s) {
      const std::size_t anchor = uniform_index(rng, static_cast<std::size_t>(res.sets.k));
      ContrastiveLoss cl = contrastive_loss(net, anchor, pos, neg, cfg.temperature);
      res.losses.push_back(cl.loss);
      adam_step_inplace(net, cl.grad, opt);
    }
  }
  res.net = std::move(net);
  res.opt = std::move(opt);
  return res;
}

inline Mat embed(const MlpParams& net, const Mat& observations) { return mlp_forward_batch(net, observations); }

inline ClusterSelection select_cl_detail(const VisitedStatesBuffer& buf, std::size_t n, int k, const MlpParams& net,
                                         Rng& rng) {
  if (buf.empty() || n == 0) return {};
  return cluster_select(embed(net, observation_matrix(buf)), n, k, kKMeansMaxIters, rng);
}

inline std::vector<std::size_t> select_cl_indices(const VisitedStatesBuffer& buf, std::size_t n, int k,
                                                  const MlpParams& net, Rng& rng) {
  return select_cl_detail(buf, n, k, net, rng).indices;
}

inline std::vector<StateRecord> select_cl(const VisitedStatesBuffer& buf, std::size_t n, int k, const MlpParams& net,
                                          Rng& rng) {
  return gather(buf, select_cl_indices(buf, n, k, net, rng));
}

}  // namespace isblab
