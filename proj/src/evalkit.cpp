#include "cotrec/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "cotrec/error.hpp"

namespace cotrec {

int hit_at_k(RankOfTarget r, int k) {
  if (k < 1) throw ConfigError("hit_at_k: K must be >= 1");
  return r.has_value() && *r <= k ? 1 : 0;
}

double ndcg_at_k(RankOfTarget r, int k) {
  if (k < 1) throw ConfigError("ndcg_at_k: K must be >= 1");
  if (!r.has_value() || *r > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*r) + 1.0);
}

double sample_bias(const PositionBiasRecord& rec) {
  if (rec.m < 1) throw ConfigError("sample_bias: slate size must be >= 1");
  if (static_cast<int>(rec.ranks.size()) != rec.m) {
    throw ConfigError("sample_bias: sample " + std::to_string(rec.sample_id) + " has " +
                      std::to_string(rec.ranks.size()) + " ranks, expected " +
                      std::to_string(rec.m));
  }
  double mean = 0.0;
  for (int r : rec.ranks) {
    if (r < 1 || r > rec.m) {
      throw ConfigError("sample_bias: rank " + std::to_string(r) + " outside [1, " +
                        std::to_string(rec.m) + "]");
    }
    mean += r;
  }
  mean /= static_cast<double>(rec.m);
  double mad = 0.0;
  for (int r : rec.ranks) mad += std::abs(static_cast<double>(r) - mean);
  return mad / static_cast<double>(rec.m);
}

double mapb(const std::vector<PositionBiasRecord>& records) {
  if (records.empty()) throw ConfigError("mapb: no position-bias records");
  const int m = records.front().m;
  double total = 0.0;
  for (const auto& rec : records) {
    if (rec.m != m) {
      throw ConfigError("mapb: records mix slate sizes " + std::to_string(m) + " and " +
                        std::to_string(rec.m));
    }
    total += sample_bias(rec);
  }
  return total / static_cast<double>(records.size());
}

std::vector<PositionBiasRecord> position_bias_harness(
    SlateRanker& ranker, const std::vector<BiasSample>& samples, int m) {
  if (m < 1) throw ConfigError("position_bias_harness: M must be >= 1");
  std::vector<PositionBiasRecord> records;
  records.reserve(samples.size());
  for (const auto& sample : samples) {
    if (static_cast<int>(sample.fillers.size()) != m - 1) {
      throw ConfigError("position_bias_harness: sample " +
                        std::to_string(sample.sample_id) + " has " +
                        std::to_string(sample.fillers.size()) + " fillers, expected " +
                        std::to_string(m - 1));
    }
    PositionBiasRecord rec;
    rec.sample_id = sample.sample_id;
    rec.m = m;
    rec.ranks.reserve(static_cast<std::size_t>(m));
    for (int j = 1; j <= m; ++j) {
      std::vector<int> candidates = sample.fillers;
      candidates.insert(candidates.begin() + (j - 1), sample.target);
      CandidateSlate slate = CandidateSlate::make(sample.user, std::move(candidates), j - 1);
      RankingResult res = ranker.rank(slate);
      int rank = 0;
      for (std::size_t idx = 0; idx < res.permutation.size(); ++idx) {
        if (res.permutation[idx] == j - 1) {
          rank = static_cast<int>(idx) + 1;
          break;
        }
      }
      rec.ranks.push_back(rank);
    }
    rec.mean_rank =
        std::accumulate(rec.ranks.begin(), rec.ranks.end(), 0.0) / static_cast<double>(m);
    records.push_back(std::move(rec));
  }
  return records;
}

void MetricReport::add(const std::string& name, std::vector<double> per_run) {
  MetricSeries s;
  s.name = name;
  s.mean = per_run.empty()
               ? 0.0
               : std::accumulate(per_run.begin(), per_run.end(), 0.0) /
                     static_cast<double>(per_run.size());
  s.per_run = std::move(per_run);
  metrics.push_back(std::move(s));
}

const MetricSeries* MetricReport::find(const std::string& name) const {
  for (const auto& s : metrics) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

double MetricReport::mean_of(const std::string& name) const {
  const MetricSeries* s = find(name);
  if (!s) throw ConfigError("metric report has no series named '" + name + "'");
  return s->mean;
}

namespace {

std::string fmt10(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10f", v);
  return buf;
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "# dataset=" << dataset_tag << " retriever=" << retriever_tag
     << " ranker=" << ranker_tag << " k=" << k << " runs=" << runs << "\n";
  os << "metric,mean";
  for (int r = 1; r <= runs; ++r) os << ",run" << r;
  os << "\n";
  for (const auto& s : metrics) {
    os << s.name << "," << fmt10(s.mean);
    for (double v : s.per_run) os << "," << fmt10(v);
    os << "\n";
  }
  return os.str();
}

std::string MetricReport::to_table() const {
  std::ostringstream os;
  os << "dataset=" << dataset_tag << "  retriever=" << retriever_tag
     << "  ranker=" << ranker_tag << "  K=" << k << "  runs=" << runs << "\n";
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-18s %12s", "metric", "mean");
  os << buf;
  for (int r = 1; r <= runs; ++r) {
    std::snprintf(buf, sizeof(buf), " %11s%d", "run", r);
    os << buf;
  }
  os << "\n";
  for (const auto& s : metrics) {
    std::snprintf(buf, sizeof(buf), "%-18s %12.4f", s.name.c_str(), s.mean);
    os << buf;
    for (double v : s.per_run) {
      std::snprintf(buf, sizeof(buf), " %12.4f", v);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

Json MetricReport::to_json() const {
  Json j;
  j["dataset"] = dataset_tag;
  j["retriever"] = retriever_tag;
  j["ranker"] = ranker_tag;
  j["k"] = k;
  j["runs"] = runs;
  Json m = Json::object();
  for (const auto& s : metrics) {
    m[s.name] = Json{{"mean", s.mean}, {"per_run", s.per_run}};
  }
  j["metrics"] = m;
  return j;
}

MetricReport eval_retriever(const RetrieverParams& params, const Dataset& dataset,
                            const SplitSpec& splits, int k,
                            const std::string& dataset_tag,
                            const std::string& retriever_tag) {
  if (k < 1) throw ConfigError("eval_retriever: K must be >= 1");
  double hit = 0.0, ndcg = 0.0;
  int n = 0;
  for (int u = 1; u <= dataset.num_users(); ++u) {
    const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
    if (split.test <= 0) continue;
    std::vector<int> input = split.train;
    if (split.val > 0) input.push_back(split.val);
    RankOfTarget r = rank_of_item(params, u, input, split.test);
    hit += hit_at_k(r, k);
    ndcg += ndcg_at_k(r, k);
    ++n;
  }
  MetricReport rep;
  rep.dataset_tag = dataset_tag;
  rep.retriever_tag = retriever_tag;
  rep.ranker_tag = "none";
  rep.k = k;
  rep.runs = 1;
  const double denom = n > 0 ? static_cast<double>(n) : 1.0;
  rep.add("hit@" + std::to_string(k), {hit / denom});
  rep.add("ndcg@" + std::to_string(k), {ndcg / denom});
  return rep;
}

MetricReport eval_ranker(SlateRanker& ranker, const RetrieverParams& params,
                         const Dataset& dataset, const SplitSpec& splits,
                         const RankerEvalConfig& cfg) {
  if (cfg.k < 1 || cfg.slate_size < 1 || cfg.runs < 1) {
    throw ConfigError("eval_ranker: k, slate_size and runs must all be >= 1");
  }
  std::vector<int> test_users;
  for (int u = 1; u <= dataset.num_users(); ++u) {
    if (splits.users.at(static_cast<std::size_t>(u)).test > 0) test_users.push_back(u);
  }

  std::vector<double> ndcg_runs, strict_runs, mapb_runs, injected_runs;
  for (int run = 0; run < cfg.runs; ++run) {
    const std::uint64_t run_seed = cfg.seed + static_cast<std::uint64_t>(run);
    double nd = 0.0, nds = 0.0;
    int n = 0, n_injected = 0;
    for (int u : test_users) {
      const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
      std::vector<int> input = split.train;
      if (split.val > 0) input.push_back(split.val);
      TopK topk = retrieve_topk(params, u, input, cfg.slate_size);
      if (topk.items.empty()) continue;
      std::vector<int> candidates = topk.items;
      int target_pos = -1;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (candidates[i] == split.test) target_pos = static_cast<int>(i);
      }
      bool injected = false;
      if (target_pos < 0) {
        candidates.back() = split.test;
        target_pos = static_cast<int>(candidates.size()) - 1;
        injected = true;
        ++n_injected;
      }
      CandidateSlate slate = CandidateSlate::make(u, std::move(candidates), target_pos);
      RankingResult res = ranker.rank(slate);
      int rank = 0;
      for (std::size_t idx = 0; idx < res.permutation.size(); ++idx) {
        if (res.permutation[idx] == target_pos) {
          rank = static_cast<int>(idx) + 1;
          break;
        }
      }
      const double v = ndcg_at_k(rank, cfg.k);
      nd += v;
      if (!injected) nds += v;
      ++n;
    }
    const double denom = n > 0 ? static_cast<double>(n) : 1.0;
    ndcg_runs.push_back(nd / denom);
    strict_runs.push_back(nds / denom);
    injected_runs.push_back(static_cast<double>(n_injected) / denom);

    // Position-bias probe on a seeded subsample of test users.
    std::vector<int> pool = test_users;
    std::mt19937_64 rng(run_seed);
    std::shuffle(pool.begin(), pool.end(), rng);
    if (static_cast<int>(pool.size()) > cfg.mapb_subsample) {
      pool.resize(static_cast<std::size_t>(cfg.mapb_subsample));
    }
    std::vector<BiasSample> samples;
    for (int u : pool) {
      const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
      std::vector<int> input = split.train;
      if (split.val > 0) input.push_back(split.val);
      TopK topk = retrieve_topk(params, u, input, cfg.slate_size);
      std::vector<int> fillers;
      for (int item : topk.items) {
        if (item != split.test) fillers.push_back(item);
      }
      if (static_cast<int>(fillers.size()) < cfg.slate_size - 1) continue;
      fillers.resize(static_cast<std::size_t>(cfg.slate_size - 1));
      BiasSample s;
      s.sample_id = u;
      s.user = u;
      s.target = split.test;
      s.fillers = std::move(fillers);
      samples.push_back(std::move(s));
    }
    if (samples.empty()) {
      mapb_runs.push_back(0.0);
    } else {
      mapb_runs.push_back(mapb(position_bias_harness(ranker, samples, cfg.slate_size)));
    }
  }

  MetricReport rep;
  rep.dataset_tag = cfg.dataset_tag;
  rep.retriever_tag = cfg.retriever_tag;
  rep.ranker_tag = cfg.ranker_tag;
  rep.k = cfg.k;
  rep.runs = cfg.runs;
  rep.add("ndcg@" + std::to_string(cfg.k), std::move(ndcg_runs));
  rep.add("ndcg@" + std::to_string(cfg.k) + "_strict", std::move(strict_runs));
  rep.add("mapb", std::move(mapb_runs));
  rep.add("injected_frac", std::move(injected_runs));
  return rep;
}

void save_report_csv(const MetricReport& report, const std::filesystem::path& path) {
  atomic_write_file(path, report.to_csv());
}

void save_report_json(const MetricReport& report, const std::filesystem::path& path) {
  atomic_write_file(path, report.to_json().dump(2) + "\n");
}

}  // namespace cotrec
