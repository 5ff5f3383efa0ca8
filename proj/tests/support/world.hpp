#pragma once

#include <filesystem>
#include <string>

#include "cotrec/corpus.hpp"

// A small synthetic catalog world shared by tests: `clusters` groups of
// `items_per_cluster` items whose captions carry a "[cluster k]" tag (the
// mock embedding backend keys on that tag, so text-initialized embeddings
// become cluster-aligned). Each user belongs to one cluster and consumes all
// of its items in a rotated cycle, so the next item is always the current
// item's successor within the cluster — a memorizable sequential pattern.
namespace testworld {

struct WorldSpec {
  int clusters = 4;
  int items_per_cluster = 5;
  int users = 50;
};

struct WorldFiles {
  std::filesystem::path interactions;
  std::filesystem::path items;
};

// Creates a unique empty directory under the system temp dir.
std::filesystem::path fresh_temp_dir(const std::string& prefix);

// Writes interactions.jsonl / items.jsonl fixture files under `dir`.
WorldFiles write_world(const std::filesystem::path& dir, const WorldSpec& spec = {});

// The same world ingested into a dense dataset (no k-core losses by
// construction: every user and item has degree >= 5 with the default spec).
cotrec::Dataset world_dataset(const WorldSpec& spec = {});

}  // namespace testworld
