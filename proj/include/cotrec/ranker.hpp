#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cotrec/corpus.hpp"
#include "cotrec/extraction.hpp"
#include "cotrec/gateway.hpp"
#include "cotrec/prompts.hpp"
#include "cotrec/retriever.hpp"

namespace cotrec {

// Which prompt the list-wise ranker uses: `kPlain` shows history and
// candidate captions only; `kEnriched` adds the user's preference text and
// each candidate's subjective keywords.
enum class RankerVariant { kPlain, kEnriched };

std::string to_string(RankerVariant v);
RankerVariant ranker_variant_from_string(const std::string& s);

// An ordered candidate list for one user, in retriever order, with index
// labels 'A'.. assigned positionally. `target_pos` (0-based) is evaluation
// metadata only and must never leak into prompts.
struct CandidateSlate {
  int user = 0;
  std::vector<int> candidates;  // dense item ids, retriever order
  std::vector<char> labels;     // labels[i] == 'A' + i
  std::optional<int> target_pos;

  // Validates size (1..26), distinctness, and target_pos range.
  static CandidateSlate make(int user, std::vector<int> candidates,
                             std::optional<int> target_pos = std::nullopt);

  int size() const { return static_cast<int>(candidates.size()); }
};

// Outcome of ranking one slate. `permutation` holds 0-based slate positions,
// best first, and is always a bijection on 0..M-1.
struct RankingResult {
  std::vector<int> permutation;
  std::vector<double> scores;  // score per original slate position
  bool fallback_used = false;
};

// Indexed view over extraction artifacts for prompt building.
struct ExtractionArtifacts {
  std::map<int, UserPreference> preferences;                 // by user
  std::map<std::pair<int, int>, ItemPerception> perceptions;  // by (user, item)

  static ExtractionArtifacts index(const std::vector<UserPreference>& prefs,
                                   const std::vector<ItemPerception>& percs);
};

// Builds the list-wise ranking prompt. History is the user's model input
// sequence; the last `history_len` items appear in the prompt. Enriched mode
// requires `artifacts` with the user's preference and a perception for every
// candidate (ConfigError naming the missing (user, item) otherwise).
ChatRequest build_prompt(const PromptLibrary& lib, RankerVariant variant,
                         const std::vector<int>& history, int history_len,
                         const CandidateSlate& slate, const Dataset& dataset,
                         const ExtractionArtifacts* artifacts,
                         double temperature = 0.0, int max_tokens = 16);

// Obtains label scores through the gateway and sorts the slate by descending
// score, ties keeping retriever order. If the backend cannot produce label
// scores, falls back to parsing the single generated label (rank 1, rest in
// retriever order, fallback_used = true); no valid label -> RankingError.
RankingResult rank_slate(const ChatRequest& req, const CandidateSlate& slate,
                         Gateway& gateway);

// One persisted ranking call (JSON Lines record).
struct RankTranscript {
  int user = 0;
  std::string variant;
  std::string labels;  // e.g. "ABCDE"
  std::vector<int> candidate_ids;
  std::vector<double> scores;
  std::vector<int> permutation;  // 1-based slate positions, best first
  bool fallback_used = false;
};

void save_rank_transcripts(const std::filesystem::path& path,
                           const std::vector<RankTranscript>& transcripts);
std::vector<RankTranscript> load_rank_transcripts(const std::filesystem::path& path);

// Interface used by the evaluation harness so mock rankers can stand in for
// the LLM-backed one.
class SlateRanker {
 public:
  virtual ~SlateRanker() = default;
  virtual RankingResult rank(const CandidateSlate& slate) = 0;
};

struct RankerConfig {
  RankerVariant variant = RankerVariant::kPlain;
  int slate_size = 10;   // M
  int history_len = 10;  // h most recent input items shown in the prompt
  double temperature = 0.0;
  int max_tokens = 16;
};

// LLM-backed slate ranker. `input_seqs` maps each user to the same item
// sequence used as retriever input; prompts show its last `history_len`
// items. Records one RankTranscript per call.
class LlmSlateRanker : public SlateRanker {
 public:
  LlmSlateRanker(Gateway& gateway, const PromptLibrary& lib, const Dataset& dataset,
                 RankerConfig cfg, const ExtractionArtifacts* artifacts,
                 std::map<int, std::vector<int>> input_seqs);

  RankingResult rank(const CandidateSlate& slate) override;

  const std::vector<RankTranscript>& transcripts() const { return transcripts_; }
  void clear_transcripts() { transcripts_.clear(); }

 private:
  Gateway& gateway_;
  const PromptLibrary& lib_;
  const Dataset& dataset_;
  RankerConfig cfg_;
  const ExtractionArtifacts* artifacts_;
  std::map<int, std::vector<int>> input_seqs_;
  std::vector<RankTranscript> transcripts_;
};

struct RankUserOutput {
  CandidateSlate slate;
  RankingResult result;
};

// Composes retrieve_topk -> build_prompt -> rank_slate for one user.
RankUserOutput rank_user(int user, const RetrieverParams& params,
                         const std::vector<int>& input_seq, RankerVariant variant,
                         int slate_size, int history_len, const PromptLibrary& lib,
                         const Dataset& dataset, const ExtractionArtifacts* artifacts,
                         Gateway& gateway);

}  // namespace cotrec
