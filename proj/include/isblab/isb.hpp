#pragma once

// Initial State Buffer: the rolling visited-states buffer with its admission
// filters, the state selection strategies, and the p-mixture reset sampler.

#include <algorithm>
#include <atomic>
#include <deque>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "isblab/kmeans.hpp"
#include "isblab/rollout.hpp"

namespace isblab {

struct StateRecord {
  EnvState env_state;
  Vec observation;
  int episode_step = 0;
  double accumulated_reward = 0.0;
  Provenance init_provenance = Provenance::Nominal;
  bool is_terminal = false;  // the step taken from this state ended the episode
  int steps_to_end = -1;     // steps until the episode's done flag, -1 if it ran past the rollout
  // Where the record came from.
  long iteration = -1;
  int lane = -1;
  int step = -1;
};

/// Process-wide count of buffer constructions, read by tests that check a
/// vanilla run never builds one.
inline std::atomic<long>& buffer_constructions() {
  static std::atomic<long> count{0};
  return count;
}

/// Bounded FIFO: pushing beyond capacity drops the oldest entry.
template <class T>
class FifoBuffer {
 public:
  explicit FifoBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("buffer capacity must be positive");
    buffer_constructions().fetch_add(1, std::memory_order_relaxed);
  }
  FifoBuffer(const FifoBuffer& o) : capacity_(o.capacity_), items_(o.items_) {
    buffer_constructions().fetch_add(1, std::memory_order_relaxed);
  }
  FifoBuffer& operator=(const FifoBuffer&) = default;
  FifoBuffer(FifoBuffer&&) noexcept = default;
  FifoBuffer& operator=(FifoBuffer&&) noexcept = default;

  void push(T item) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(item));
  }

  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const T& operator[](std::size_t i) const { return items_[i]; }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  void clear() { items_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
};

using VisitedStatesBuffer = FifoBuffer<StateRecord>;
using InitialStateBuffer = FifoBuffer<StateRecord>;

struct FilterConfig {
  int min_episode_step = 15;  // 0 disables
  bool require_nonneg_reward = true;
  bool require_nominal_start_trajectory = false;

  void validate() const {
    if (min_episode_step < 0) throw ConfigError("filters.min_episode_step must be >= 0");
  }
};

inline bool passes_filters(const StateRecord& rec, const FilterConfig& f) {
  if (rec.episode_step < f.min_episode_step) return false;
  if (f.require_nonneg_reward && rec.accumulated_reward < 0.0) return false;
  if (f.require_nominal_start_trajectory && rec.init_provenance != Provenance::Nominal) return false;
  return true;
}

inline bool push_visited(VisitedStatesBuffer& buf, StateRecord rec, const FilterConfig& f) {
  if (!passes_filters(rec, f)) return false;
  buf.push(std::move(rec));
  return true;
}

/// One record per batch sample, in lane-major order.
inline std::vector<StateRecord> records_from_batch(const RolloutBatch& b) {
  std::vector<StateRecord> out;
  out.reserve(b.size());
  for (int l = 0; l < b.num_lanes; ++l) {
    int next_done = -1;  // index of the next done step in this lane, scanning backwards
    std::vector<int> to_end(static_cast<std::size_t>(b.steps));
    for (int t = b.steps - 1; t >= 0; --t) {
      if (b.dones[b.index(l, t)]) next_done = t;
      to_end[static_cast<std::size_t>(t)] = next_done < 0 ? -1 : next_done - t;
    }
    for (int t = 0; t < b.steps; ++t) {
      const std::size_t i = b.index(l, t);
      StateRecord r;
      r.env_state = b.states[i];
      r.observation = b.observations.col(static_cast<Eigen::Index>(i));
      r.episode_step = b.states[i].episode_step;
      r.accumulated_reward = b.states[i].accumulated_reward;
      r.init_provenance = b.provenance[i];
      r.is_terminal = b.dones[i] != 0;
      r.steps_to_end = to_end[static_cast<std::size_t>(t)];
      r.iteration = b.iteration;
      r.lane = l;
      r.step = t;
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Pushes every record of the batch through the filters; returns how many were accepted.
inline std::size_t push_batch(VisitedStatesBuffer& buf, const RolloutBatch& b, const FilterConfig& f) {
  std::size_t accepted = 0;
  for (StateRecord& r : records_from_batch(b)) accepted += push_visited(buf, std::move(r), f) ? 1 : 0;
  return accepted;
}

inline Mat observation_matrix(const VisitedStatesBuffer& buf) {
  if (buf.empty()) return {};
  Mat m(buf[0].observation.size(), static_cast<Eigen::Index>(buf.size()));
  for (std::size_t i = 0; i < buf.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = buf[i].observation;
  return m;
}

inline std::vector<StateRecord> gather(const VisitedStatesBuffer& buf, const std::vector<std::size_t>& idx) {
  std::vector<StateRecord> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(buf[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Selection strategies. Each has an index form (positions in the buffer) and
// a record form. An empty result is the empty-selection signal.

enum class Strategy { Vanilla, Random, Obs, Cl, Terminal, Value };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Vanilla: return "vanilla";
    case Strategy::Random: return "random";
    case Strategy::Obs: return "obs";
    case Strategy::Cl: return "cl";
    case Strategy::Terminal: return "terminal";
    case Strategy::Value: return "value";
  }
  return "vanilla";
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy st : {Strategy::Vanilla, Strategy::Random, Strategy::Obs, Strategy::Cl, Strategy::Terminal, Strategy::Value})
    if (s == strategy_name(st)) return st;
  throw ConfigError("unknown isb strategy '" + s + "' (expected vanilla, random, obs, cl, terminal or value)");
}

/// n distinct slots uniformly without replacement; everything when n >= size.
inline std::vector<std::size_t> select_random_indices(const VisitedStatesBuffer& buf, std::size_t n, Rng& rng) {
  std::vector<std::size_t> all(buf.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (n >= all.size()) return all;
  std::vector<std::size_t> out;
  out.reserve(n);
  std::sample(all.begin(), all.end(), std::back_inserter(out), static_cast<std::ptrdiff_t>(n), rng);
  return out;
}

inline std::vector<StateRecord> select_random(const VisitedStatesBuffer& buf, std::size_t n, Rng& rng) {
  return gather(buf, select_random_indices(buf, n, rng));
}

inline constexpr int kKMeansMaxIters = 50;

inline std::vector<std::size_t> select_obs_indices(const VisitedStatesBuffer& buf, std::size_t n, int k, Rng& rng) {
  if (buf.empty() || n == 0) return {};
  return cluster_select(observation_matrix(buf), n, k, kKMeansMaxIters, rng).indices;
}

inline std::vector<StateRecord> select_obs(const VisitedStatesBuffer& buf, std::size_t n, int k, Rng& rng) {
  return gather(buf, select_obs_indices(buf, n, k, rng));
}

/// Uniform over records at most `window` steps before their episode's done flag.
inline std::vector<std::size_t> select_terminal_indices(const VisitedStatesBuffer& buf, std::size_t n, int window,
                                                        Rng& rng) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < buf.size(); ++i)
    if (buf[i].steps_to_end >= 0 && buf[i].steps_to_end <= window) eligible.push_back(i);
  if (n >= eligible.size()) return eligible;
  std::vector<std::size_t> out;
  std::sample(eligible.begin(), eligible.end(), std::back_inserter(out), static_cast<std::ptrdiff_t>(n), rng);
  return out;
}

inline std::vector<StateRecord> select_terminal(const VisitedStatesBuffer& buf, std::size_t n, int window, Rng& rng) {
  return gather(buf, select_terminal_indices(buf, n, window, rng));
}

/// The n records with the highest predicted value, newest first among ties.
inline std::vector<std::size_t> select_value_indices(const VisitedStatesBuffer& buf, std::size_t n,
                                                     const MlpParams& value_net) {
  if (buf.empty() || n == 0) return {};
  const Mat v = mlp_forward_batch(value_net, observation_matrix(buf));
  std::vector<std::size_t> order(buf.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double va = v(0, static_cast<Eigen::Index>(a)), vb = v(0, static_cast<Eigen::Index>(b));
    if (va != vb) return va > vb;
    return a > b;
  });
  order.resize(std::min(n, order.size()));
  return order;
}

inline std::vector<StateRecord> select_value(const VisitedStatesBuffer& buf, std::size_t n, const MlpParams& value_net) {
  return gather(buf, select_value_indices(buf, n, value_net));
}

inline void refresh_isb(InitialStateBuffer& isb, const std::vector<StateRecord>& selected) {
  for (const StateRecord& r : selected) isb.push(r);
}

/// With probability p (and a non-empty buffer) a uniformly drawn ISB entry,
/// otherwise a nominal start.
inline InitialState sample_initial(const InitialStateBuffer& isb, double p,
                                   const std::function<EnvState()>& nominal_reset, Rng& rng) {
  const double u = uniform01(rng);
  if (!isb.empty() && u < p) return {isb[uniform_index(rng, isb.size())].env_state, Provenance::Isb};
  return {nominal_reset(), Provenance::Nominal};
}

/// Reset sampler drawing from a frozen copy of the ISB; p0 draws use the lane's own stream.
inline ResetSampler make_isb_sampler(std::shared_ptr<const InitialStateBuffer> isb, double p, Rng& rng) {
  return [isb = std::move(isb), p, &rng](Environment& env) {
    return sample_initial(*isb, p, [&env] { return env.draw_nominal(); }, rng);
  };
}

// ---------------------------------------------------------------------------
// JSON-lines dumps

inline nlohmann::json record_to_json(const StateRecord& r) {
  return {{"env_state", state_to_json(r.env_state)},
          {"observation", vec_to_json(r.observation)},
          {"episode_step", r.episode_step},
          {"accumulated_reward", r.accumulated_reward},
          {"init_provenance", provenance_name(r.init_provenance)},
          {"is_terminal", r.is_terminal},
          {"steps_to_end", r.steps_to_end},
          {"iteration", r.iteration},
          {"lane", r.lane},
          {"step", r.step}};
}

inline StateRecord record_from_json(const nlohmann::json& j) {
  StateRecord r;
  r.env_state = state_from_json(j.at("env_state"));
  r.observation = vec_from_json(j.at("observation"));
  r.episode_step = j.at("episode_step").get<int>();
  r.accumulated_reward = j.at("accumulated_reward").get<double>();
  r.init_provenance = parse_provenance(j.at("init_provenance").get<std::string>());
  r.is_terminal = j.at("is_terminal").get<bool>();
  r.steps_to_end = j.at("steps_to_end").get<int>();
  r.iteration = j.at("iteration").get<long>();
  r.lane = j.at("lane").get<int>();
  r.step = j.at("step").get<int>();
  return r;
}

template <class Records>
void dump_records(const std::string& path, const Records& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const StateRecord& r : records) out << record_to_json(r).dump() << '\n';
}

inline std::vector<StateRecord> load_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<StateRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(record_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace isblab
