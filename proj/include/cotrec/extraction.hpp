#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cotrec/corpus.hpp"
#include "cotrec/gateway.hpp"
#include "cotrec/prompts.hpp"

namespace cotrec {

// Overlapping chronological windows over one user's sequence.
struct BatchPlan {
  std::vector<std::pair<std::size_t, std::size_t>> windows;  // [start, end)
  std::size_t batch_size = 0;
  std::size_t overlap = 0;
};

// Windows start at 0, B-O, 2(B-O), ...; each is [start, min(start+B, n));
// generation stops once a window's end reaches n.
BatchPlan plan_batches(std::size_t n, std::size_t batch_size, std::size_t overlap);

struct ShortTermInterest {
  int user_id = 0;
  std::size_t window_index = 0;
  std::string text;
};

struct UserPreference {
  int user_id = 0;
  std::string text;
  std::uint32_t revision = 0;  // >= 1 once initialized
};

struct ItemPerception {
  int user_id = 0;
  int item_id = 0;
  std::string objective_description;
  std::string simulated_review;
  std::vector<std::string> keywords;
};

// One chat call as seen by the extraction stage; persisted for audit and
// for the leakage scan. `item_id` is 0 except for perception steps, where
// it names the perceived item.
struct TranscriptRecord {
  std::string op;  // summarize | merge | describe | review | keywords
  int user_id = 0;
  int item_id = 0;
  std::string system_prompt;
  std::string user_prompt;
  std::string response;
};

struct ExtractionConfig {
  std::size_t batch_size = 10;
  std::size_t overlap = 2;
  bool summarizer_sees_prior = false;
  std::size_t keywords_min = 3;
  std::size_t keywords_max = 10;
  int max_tokens = 512;
};

// Renders one item as a prompt line: "- [i<dense id>] <caption>". The dense
// id tag is what the leakage scan matches on.
std::string item_prompt_line(int item, const ItemMeta& meta);

// Splits a semicolon-delimited keyword line: trim, drop empties, dedup
// preserving order, truncate to `max_keep`.
std::vector<std::string> parse_keyword_line(const std::string& line,
                                            std::size_t max_keep);

// Drives the extraction-stage chat operations against a gateway. Methods
// are synchronous; the drivers below run users sequentially so artifacts
// and transcripts come out in canonical order.
class Extractor {
 public:
  Extractor(Gateway& gateway, PromptLibrary prompts, ExtractionConfig cfg);

  ShortTermInterest summarize_batch(int user, std::size_t window_index,
                                    const std::vector<int>& window_items,
                                    const Dataset& dataset,
                                    const std::optional<UserPreference>& prior);
  UserPreference merge_preference(const UserPreference& long_term,
                                  const ShortTermInterest& short_term);
  // Folds the train-split items of one user: window 1's summary initializes
  // the preference; each later window is summarized then merged. Final
  // revision equals the number of windows.
  UserPreference maintain_preference(int user, const std::vector<int>& train_items,
                                     const Dataset& dataset);

  std::string describe_item(int item, const Dataset& dataset);  // memoized per item
  std::string roleplay_review(const UserPreference& pref, int item,
                              const Dataset& dataset, const std::string& description);
  std::vector<std::string> extract_keywords(const std::string& review);
  // describe -> review -> keywords; errors are re-thrown naming the step.
  ItemPerception perceive_item(const UserPreference& pref, int item,
                               const Dataset& dataset);

  const std::vector<TranscriptRecord>& transcripts() const { return transcripts_; }
  void clear_transcripts() { transcripts_.clear(); }

  const ExtractionConfig& config() const { return cfg_; }

 private:
  std::string run_chat(const std::string& op, int user, int item,
                       const ChatRequest& req);

  Gateway& gateway_;
  PromptLibrary prompts_;
  ExtractionConfig cfg_;
  std::vector<TranscriptRecord> transcripts_;
  std::map<int, std::string> description_cache_;
};

// Sequential drivers used by the CLI. `existing` entries are kept verbatim
// and skipped (resume support); results come back sorted by user id /
// (user id, item id).
std::vector<UserPreference> extract_all_preferences(
    Extractor& ex, const Dataset& dataset, const SplitSpec& splits,
    const std::vector<UserPreference>& existing);

std::vector<ItemPerception> extract_all_perceptions(
    Extractor& ex, const Dataset& dataset,
    const std::vector<UserPreference>& preferences,
    const std::vector<std::pair<int, int>>& pairs,
    const std::vector<ItemPerception>& existing);

// Leakage scan over extraction transcripts: no prompt may contain the
// dense-id tag of a val/test item of the user it was issued for. For
// perception steps the perceived item itself is exempt (it is the subject
// of the call; candidate slates at evaluation time legitimately include
// held-out items).
struct LeakageReport {
  std::size_t records_scanned = 0;
  std::size_t violations = 0;
  std::vector<std::string> details;  // capped at 20 entries
};

LeakageReport scan_transcripts_for_leakage(const std::vector<TranscriptRecord>& records,
                                           const Dataset& dataset,
                                           const SplitSpec& splits);

// JSONL persistence.
void save_preferences(const std::filesystem::path& path,
                      const std::vector<UserPreference>& prefs);
std::vector<UserPreference> load_preferences(const std::filesystem::path& path);
void save_perceptions(const std::filesystem::path& path,
                      const std::vector<ItemPerception>& percs);
std::vector<ItemPerception> load_perceptions(const std::filesystem::path& path);
void save_transcripts(const std::filesystem::path& path,
                      const std::vector<TranscriptRecord>& records);
std::vector<TranscriptRecord> load_transcripts(const std::filesystem::path& path);

}  // namespace cotrec
