#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace cotrec {

// One timestamped (user, item) event from the interaction log.
struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

struct ItemMeta {
  std::string item_id;
  std::string caption;
  std::string description;  // may be empty
};

// Dense-id event inside a user sequence.
struct Event {
  int item = 0;
  std::int64_t timestamp = 0;
};

// Immutable interaction corpus with dense 1-based user/item ids.
// Id 0 is reserved for sequence padding and never names an entity.
// Per-user sequences are sorted by timestamp; equal timestamps keep
// input order. Exact duplicate (user, item, timestamp) triples are
// dropped at construction.
class Dataset {
 public:
  Dataset() = default;

  // Dense item ids follow metadata order; dense user ids follow first
  // appearance in the interaction list. Every interaction must reference
  // a known item.
  static Dataset build(const std::vector<Interaction>& interactions,
                       const std::vector<ItemMeta>& items);

  int num_users() const { return static_cast<int>(user_ids_.size()) - 1; }
  int num_items() const { return static_cast<int>(item_ids_.size()) - 1; }

  const std::vector<Event>& sequence(int user) const { return sequences_.at(static_cast<std::size_t>(user)); }
  const ItemMeta& meta(int item) const { return metas_.at(static_cast<std::size_t>(item)); }
  const std::string& user_id(int user) const { return user_ids_.at(static_cast<std::size_t>(user)); }
  const std::string& item_id(int item) const { return item_ids_.at(static_cast<std::size_t>(item)); }

  // 0 when the id is unknown.
  int user_index(const std::string& id) const;
  int item_index(const std::string& id) const;

  std::size_t num_interactions() const;

 private:
  std::vector<std::string> user_ids_{""};  // [0] unused
  std::vector<std::string> item_ids_{""};  // [0] unused
  std::unordered_map<std::string, int> user_index_;
  std::unordered_map<std::string, int> item_index_;
  std::vector<std::vector<Event>> sequences_{{}};  // [0] unused
  std::vector<ItemMeta> metas_{{}};                // [0] unused
};

// Reads interactions and item metadata from JSON Lines files.
// Interactions: {"user_id": str, "item_id": str, "timestamp": int >= 0}.
// Items: {"item_id": str, "caption": non-empty str, "description": str?}.
Dataset ingest(const std::filesystem::path& interactions_path,
               const std::filesystem::path& items_path);

// Iteratively removes users and items with fewer than k interactions until
// a fixed point. The result may be empty. Dense ids are reassigned.
Dataset filter_k_core(const Dataset& d, int k = 5);

// Leave-one-out split for one user: all but the last two events train,
// second-to-last validates, last tests.
struct UserSplit {
  std::vector<int> train;
  int val = 0;
  int test = 0;
};

struct SplitSpec {
  std::vector<UserSplit> users;  // [0] unused, indexed by dense user id
};

// Throws SplitError naming the user when a sequence is shorter than 3.
SplitSpec split_leave_one_out(const Dataset& d);

void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace cotrec
