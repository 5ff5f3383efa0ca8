#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cotrec/corpus.hpp"
#include "cotrec/io.hpp"
#include "cotrec/ranker.hpp"
#include "cotrec/retriever.hpp"

namespace cotrec {

// 1-based rank of the target item in a produced ordering; absent when the
// target is not in the candidate list.
using RankOfTarget = std::optional<int>;

// 1 iff the target is present with rank <= k.
int hit_at_k(RankOfTarget r, int k);

// 1/log2(1+r) when the target is present with rank <= k, else 0.
double ndcg_at_k(RankOfTarget r, int k);

// Ranks observed for one sample when the target is placed at each slate
// position j in 1..m; ranks[j-1] is the target's output rank for placement j.
struct PositionBiasRecord {
  int sample_id = 0;
  int m = 0;
  std::vector<int> ranks;
  double mean_rank = 0.0;
};

// Mean absolute deviation of one record's ranks around their mean.
double sample_bias(const PositionBiasRecord& rec);

// Mean of sample biases over all records (uniform m required, non-empty).
double mapb(const std::vector<PositionBiasRecord>& records);

// One position-bias probe: a target plus exactly m-1 fillers in fixed order.
struct BiasSample {
  int sample_id = 0;
  int user = 0;
  int target = 0;
  std::vector<int> fillers;
};

// For each sample and each position j in 1..m, builds the slate with the
// target inserted at j (fillers keep relative order), ranks it, and records
// the target's output rank. Exactly m ranking calls per sample.
std::vector<PositionBiasRecord> position_bias_harness(SlateRanker& ranker,
                                                      const std::vector<BiasSample>& samples,
                                                      int m);

// One named metric with per-run values; mean is their arithmetic average.
struct MetricSeries {
  std::string name;
  std::vector<double> per_run;
  double mean = 0.0;
};

// Evaluation summary for one (dataset, retriever variant, ranker variant)
// cell: per-run metric values plus their means.
struct MetricReport {
  std::string dataset_tag;
  std::string retriever_tag;
  std::string ranker_tag;
  int k = 10;
  int runs = 1;
  std::vector<MetricSeries> metrics;

  void add(const std::string& name, std::vector<double> per_run);
  const MetricSeries* find(const std::string& name) const;
  double mean_of(const std::string& name) const;  // ConfigError if unknown

  std::string to_csv() const;
  std::string to_table() const;
  Json to_json() const;
};

// Full-catalog retrieval evaluation: for each test user, rank every item not
// in the input sequence (train+val) and score the held-out test item.
MetricReport eval_retriever(const RetrieverParams& params, const Dataset& dataset,
                            const SplitSpec& splits, int k = 10,
                            const std::string& dataset_tag = "",
                            const std::string& retriever_tag = "");

struct RankerEvalConfig {
  int k = 10;
  int slate_size = 10;  // M
  int runs = 5;
  std::uint64_t seed = 0;    // run i uses seed + i
  int mapb_subsample = 100;  // users probed by the position-bias harness per run
  std::string dataset_tag;
  std::string retriever_tag;
  std::string ranker_tag;
};

// Slate-ranking evaluation. Per run: top-M retrieval per test user (target
// injected in place of the lowest-scored filler when retrieval missed it,
// flagged), NDCG@k of the target in the ranked slate under both conventions
// (injected slates counted, and counted as zero), plus MAPB over a seeded
// user subsample via the position-bias harness.
MetricReport eval_ranker(SlateRanker& ranker, const RetrieverParams& params,
                         const Dataset& dataset, const SplitSpec& splits,
                         const RankerEvalConfig& cfg);

void save_report_csv(const MetricReport& report, const std::filesystem::path& path);
void save_report_json(const MetricReport& report, const std::filesystem::path& path);

}  // namespace cotrec
