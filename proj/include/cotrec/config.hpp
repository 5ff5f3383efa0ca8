#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cotrec/io.hpp"
#include "cotrec/retriever.hpp"

namespace cotrec {

// Declarative pipeline configuration. One JSON file configures every stage;
// command-line `--set section.key=value` overrides individual fields. All
// seeds are explicit so reruns are reproducible.
struct DataConfig {
  std::string interactions;  // JSONL interactions path
  std::string items;         // JSONL item catalog path
  int k_core = 5;
  std::string tag = "dataset";
};

struct GatewaySection {
  bool mock = true;
  std::string endpoint;  // HTTP backend base URL (non-mock)
  std::string model;
  std::string embed_model;
  std::string api_key_env = "COTREC_API_KEY";
  std::string cache_dir;  // default: <output_dir>/cache
  int max_in_flight = 8;
  int max_attempts = 5;
  int backoff_initial_ms = 1000;
  double backoff_jitter = 0.1;
  std::uint64_t mock_seed = 0;
  int mock_d_lm = 256;
  double mock_tag_noise = 0.05;
};

struct ExtractionSection {
  int batch_size = 10;
  int overlap = 2;
  std::string prompt_file;  // optional overrides for the prompt library
  int keywords_min = 3;
  int keywords_max = 10;
};

struct ReducerSection {
  int d_crm = 0;  // 0 = use retriever.d_crm
};

struct RankerSection {
  std::string variant = "plain";  // plain | enriched
  int slate_size = 10;            // M
  int history_len = 10;           // h
};

struct EvalSection {
  int k = 10;
  int runs = 5;
  int mapb_subsample = 100;
  std::uint64_t seed = 0;
};

struct PipelineConfig {
  DataConfig data;
  GatewaySection gateway;
  ExtractionSection extraction;
  ReducerSection reducer;
  ModelConfig retriever;
  RankerSection ranker;
  EvalSection eval;
  std::string output_dir = "out";

  static PipelineConfig from_json(const Json& j);
  Json to_json() const;

  static PipelineConfig load(const std::filesystem::path& path);

  // Applies one dotted-path override, e.g. "retriever.epochs=30". The value
  // is parsed as JSON when possible, else taken as a raw string.
  static void apply_override(Json& j, const std::string& assignment);

  void validate() const;

  // First 8 hex chars of the SHA-256 of the canonical JSON form; stamps the
  // artifact directory.
  std::string config_hash() const;

  int reducer_dim() const { return reducer.d_crm > 0 ? reducer.d_crm : retriever.d_crm; }
  std::filesystem::path run_dir() const {
    return std::filesystem::path(output_dir) / config_hash();
  }
  std::filesystem::path cache_dir() const {
    return gateway.cache_dir.empty()
               ? std::filesystem::path(output_dir) / "cache"
               : std::filesystem::path(gateway.cache_dir);
  }
};

// The seven ablation cells of the embedding-initialization grid, as
// (user mode, item mode) tag pairs in report order.
std::vector<std::pair<std::string, std::string>> ablation_grid();

}  // namespace cotrec
