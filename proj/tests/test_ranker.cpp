#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cotrec/corpus.hpp"
#include "cotrec/error.hpp"
#include "cotrec/extraction.hpp"
#include "cotrec/gateway.hpp"
#include "cotrec/prompts.hpp"
#include "cotrec/ranker.hpp"
#include "support/world.hpp"

using namespace cotrec;

namespace {

// Test backend that returns a scripted score per label.
class ScriptedBackend : public TextBackend {
 public:
  explicit ScriptedBackend(std::map<std::string, double> scores)
      : scores_(std::move(scores)) {}
  std::string id() const override { return "scripted"; }
  ChatResponse chat(const ChatRequest& req) override {
    ChatResponse r;
    if (!req.label_set.empty()) {
      for (const auto& l : req.label_set) {
        auto it = scores_.find(l);
        r.label_scores[l] = (it == scores_.end()) ? 0.0 : it->second;
      }
    }
    r.text = text_;
    return r;
  }
  EmbedResponse embed(const std::vector<std::string>&) override { return {}; }
  void set_text(std::string t) { text_ = std::move(t); }

 private:
  std::map<std::string, double> scores_;
  std::string text_ = "A";
};

// Backend without label-score support: raises CapabilityError when asked,
// and generates plain text otherwise.
class TextOnlyBackend : public TextBackend {
 public:
  explicit TextOnlyBackend(std::string reply) : reply_(std::move(reply)) {}
  std::string id() const override { return "textonly"; }
  ChatResponse chat(const ChatRequest& req) override {
    if (!req.label_set.empty()) {
      throw CapabilityError("label scores unsupported");
    }
    ++plain_calls_;
    return {reply_, {}};
  }
  EmbedResponse embed(const std::vector<std::string>&) override { return {}; }
  int plain_calls() const { return plain_calls_; }

 private:
  std::string reply_;
  int plain_calls_ = 0;
};

struct RankerFixture {
  Dataset dataset = testworld::world_dataset();
  PromptLibrary lib = PromptLibrary::defaults();

  CandidateSlate slate3() {
    return CandidateSlate::make(1, {4, 9, 2});
  }

  ExtractionArtifacts artifacts_for(const CandidateSlate& slate) {
    std::vector<UserPreference> prefs = {
        {slate.user, "enjoys compact gadgets and bright colors", 2}};
    std::vector<ItemPerception> percs;
    for (int item : slate.candidates) {
      percs.push_back({slate.user, item, "objective text", "review text",
                       {"kw-a-" + std::to_string(item), "kw-b", "kw-c"}});
    }
    return ExtractionArtifacts::index(prefs, percs);
  }
};

}  // namespace

TEST_CASE("slate construction assigns positional labels and validates") {
  CandidateSlate s = CandidateSlate::make(3, {10, 20, 30}, 1);
  CHECK(s.user == 3);
  CHECK(s.labels == std::vector<char>{'A', 'B', 'C'});
  CHECK(s.target_pos == 1);

  std::vector<int> ten(10);
  for (int i = 0; i < 10; ++i) ten[static_cast<std::size_t>(i)] = i + 1;
  CHECK(CandidateSlate::make(1, ten).labels.back() == 'J');

  std::vector<int> max26(26);
  for (int i = 0; i < 26; ++i) max26[static_cast<std::size_t>(i)] = i + 1;
  CHECK(CandidateSlate::make(1, max26).labels.back() == 'Z');

  std::vector<int> over(27);
  for (int i = 0; i < 27; ++i) over[static_cast<std::size_t>(i)] = i + 1;
  try {
    CandidateSlate::make(1, over);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("26") != std::string::npos);
  }

  CHECK_THROWS_AS(CandidateSlate::make(1, {}), ConfigError);
  CHECK_THROWS_AS(CandidateSlate::make(1, {1, 2, 1}), ConfigError);
  CHECK_THROWS_AS(CandidateSlate::make(1, {1, 2}, 2), ConfigError);
  CHECK_THROWS_AS(CandidateSlate::make(1, {1, 2}, -1), ConfigError);
}

TEST_CASE("plain prompt lists history and labeled candidates") {
  RankerFixture fx;
  std::vector<int> ten(10);
  for (int i = 0; i < 10; ++i) ten[static_cast<std::size_t>(i)] = i + 1;
  CandidateSlate slate = CandidateSlate::make(1, ten);
  std::vector<int> history = {11, 12, 13};
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, history, 10, slate,
                                 fx.dataset, nullptr);

  // Labels A. through J. each appear exactly once at line starts.
  for (char l = 'A'; l <= 'J'; ++l) {
    std::string needle = std::string(1, l) + ". [i";
    std::size_t first = req.user_prompt.find(needle);
    REQUIRE(first != std::string::npos);
    CHECK(req.user_prompt.find(needle, first + 1) == std::string::npos);
  }
  CHECK(req.user_prompt.find("K. [i") == std::string::npos);

  // Candidate lines carry the item tag and caption, in slate order.
  std::size_t prev = 0;
  for (int i = 0; i < slate.size(); ++i) {
    int item = slate.candidates[static_cast<std::size_t>(i)];
    std::string line = std::string(1, static_cast<char>('A' + i)) + ". [i" +
                       std::to_string(item) + "] " + fx.dataset.meta(item).caption;
    std::size_t at = req.user_prompt.find(line);
    REQUIRE(at != std::string::npos);
    CHECK(at > prev);
    prev = at;
  }

  // History lines appear in order.
  for (int h : history) {
    CHECK(req.user_prompt.find("- [i" + std::to_string(h) + "]") != std::string::npos);
  }
  // Label set is the single-character labels in order.
  REQUIRE(req.label_set.size() == 10);
  CHECK(req.label_set.front() == "A");
  CHECK(req.label_set.back() == "J");
  CHECK(req.temperature == 0.0);
  CHECK(req.max_tokens == 16);
}

TEST_CASE("history is truncated to the most recent h items") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  std::vector<int> history;
  for (int i = 1; i <= 8; ++i) history.push_back(i);
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, history, 3, slate,
                                 fx.dataset, nullptr);
  for (int kept : {6, 7, 8}) {
    CHECK(req.user_prompt.find("- [i" + std::to_string(kept) + "]") !=
          std::string::npos);
  }
  for (int dropped : {1, 2, 3, 4, 5}) {
    CHECK(req.user_prompt.find("- [i" + std::to_string(dropped) + "]") ==
          std::string::npos);
  }

  ChatRequest empty = build_prompt(fx.lib, RankerVariant::kPlain, {}, 3, slate,
                                   fx.dataset, nullptr);
  CHECK(empty.user_prompt.find("- (none)") != std::string::npos);
}

TEST_CASE("enriched prompt adds preference text and candidate keywords") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  ExtractionArtifacts art = fx.artifacts_for(slate);
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kEnriched, {1, 2}, 10, slate,
                                 fx.dataset, &art);
  CHECK(req.user_prompt.find("enjoys compact gadgets") != std::string::npos);
  for (int item : slate.candidates) {
    CHECK(req.user_prompt.find("kw-a-" + std::to_string(item)) != std::string::npos);
  }
  CHECK(req.user_prompt.find("keywords:") != std::string::npos);

  // Plain prompts must not contain the enrichment.
  ChatRequest plain = build_prompt(fx.lib, RankerVariant::kPlain, {1, 2}, 10, slate,
                                   fx.dataset, &art);
  CHECK(plain.user_prompt.find("enjoys compact gadgets") == std::string::npos);
  CHECK(plain.user_prompt.find("kw-a-") == std::string::npos);
}

TEST_CASE("enriched prompt errors name the missing artifact") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  ExtractionArtifacts art = fx.artifacts_for(slate);

  ExtractionArtifacts no_pref = art;
  no_pref.preferences.clear();
  try {
    build_prompt(fx.lib, RankerVariant::kEnriched, {1}, 10, slate, fx.dataset, &no_pref);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("user 1") != std::string::npos);
  }

  ExtractionArtifacts no_perc = art;
  no_perc.perceptions.erase({slate.user, 9});
  try {
    build_prompt(fx.lib, RankerVariant::kEnriched, {1}, 10, slate, fx.dataset, &no_perc);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("user 1") != std::string::npos);
    CHECK(msg.find("item 9") != std::string::npos);
  }

  CHECK_THROWS_AS(
      build_prompt(fx.lib, RankerVariant::kEnriched, {1}, 10, slate, fx.dataset, nullptr),
      ConfigError);
}

TEST_CASE("target position never leaks into the prompt") {
  RankerFixture fx;
  CandidateSlate with_target = CandidateSlate::make(1, {4, 9, 2}, 1);
  CandidateSlate without = CandidateSlate::make(1, {4, 9, 2});
  ChatRequest a = build_prompt(fx.lib, RankerVariant::kPlain, {3}, 10, with_target,
                               fx.dataset, nullptr);
  ChatRequest b = build_prompt(fx.lib, RankerVariant::kPlain, {3}, 10, without,
                               fx.dataset, nullptr);
  CHECK(a.system_prompt == b.system_prompt);
  CHECK(a.user_prompt == b.user_prompt);
  CHECK(a.label_set == b.label_set);
}

TEST_CASE("rank_slate sorts by descending label score") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  auto backend = std::make_shared<ScriptedBackend>(
      std::map<std::string, double>{{"A", 0.1}, {"B", 0.9}, {"C", 0.5}});
  Gateway gw(backend, nullptr);
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, {1}, 10, slate,
                                 fx.dataset, nullptr);
  RankingResult r = rank_slate(req, slate, gw);
  CHECK(r.permutation == std::vector<int>{1, 2, 0});
  CHECK(!r.fallback_used);
  REQUIRE(r.scores.size() == 3);
  CHECK(r.scores[0] == doctest::Approx(0.1));
  CHECK(r.scores[1] == doctest::Approx(0.9));
  CHECK(r.scores[2] == doctest::Approx(0.5));
}

TEST_CASE("uniform scores keep retriever order") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  auto backend = std::make_shared<ScriptedBackend>(
      std::map<std::string, double>{{"A", 0.25}, {"B", 0.25}, {"C", 0.25}});
  Gateway gw(backend, nullptr);
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, {1}, 10, slate,
                                 fx.dataset, nullptr);
  RankingResult r = rank_slate(req, slate, gw);
  CHECK(r.permutation == std::vector<int>{0, 1, 2});
  CHECK(!r.fallback_used);
}

TEST_CASE("raising one candidate's score never lowers its rank") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, {1}, 10, slate,
                                 fx.dataset, nullptr);
  auto rank_of_b = [&](double score_b) {
    auto backend = std::make_shared<ScriptedBackend>(
        std::map<std::string, double>{{"A", 0.4}, {"B", score_b}, {"C", 0.6}});
    Gateway gw(backend, nullptr);
    RankingResult r = rank_slate(req, slate, gw);
    auto it = std::find(r.permutation.begin(), r.permutation.end(), 1);
    return static_cast<int>(it - r.permutation.begin());
  };
  int prev = rank_of_b(0.0);
  for (double sb : {0.2, 0.4, 0.5, 0.6, 0.8, 1.0}) {
    int now = rank_of_b(sb);
    CHECK(now <= prev);
    prev = now;
  }
  CHECK(rank_of_b(1.0) == 0);
  CHECK(rank_of_b(0.0) == 2);
}

TEST_CASE("capability fallback parses the generated label") {
  RankerFixture fx;
  CandidateSlate slate = fx.slate3();
  ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, {1}, 10, slate,
                                 fx.dataset, nullptr);

  SUBCASE("bare label") {
    auto backend = std::make_shared<TextOnlyBackend>("C");
    Gateway gw(backend, nullptr);
    RankingResult r = rank_slate(req, slate, gw);
    CHECK(r.fallback_used);
    CHECK(r.permutation == std::vector<int>{2, 0, 1});
    CHECK(r.scores[2] == 1.0);
    CHECK(r.scores[0] == 0.0);
    CHECK(r.scores[1] == 0.0);
    CHECK(backend->plain_calls() == 1);
  }
  SUBCASE("label embedded in prose, case-insensitive") {
    auto backend = std::make_shared<TextOnlyBackend>("the winner is b) I think");
    Gateway gw(backend, nullptr);
    RankingResult r = rank_slate(req, slate, gw);
    CHECK(r.fallback_used);
    CHECK(r.permutation == std::vector<int>{1, 0, 2});
  }
  SUBCASE("letters beyond the slate are not labels") {
    // M=3: only A,B,C qualify; the leading 'd'/'D' must be skipped.
    auto backend = std::make_shared<TextOnlyBackend>("D... d... then C");
    Gateway gw(backend, nullptr);
    RankingResult r = rank_slate(req, slate, gw);
    CHECK(r.permutation == std::vector<int>{2, 0, 1});
  }
  SUBCASE("no valid label raises RankingError with a preview") {
    auto backend = std::make_shared<TextOnlyBackend>("42 17 99 -- nothing useful");
    Gateway gw(backend, nullptr);
    try {
      rank_slate(req, slate, gw);
      FAIL("expected RankingError");
    } catch (const RankingError& e) {
      CHECK(std::string(e.what()).find("42 17 99") != std::string::npos);
    }
  }
}

TEST_CASE("rank_slate output is always a bijection") {
  RankerFixture fx;
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<std::string, double> scores;
    for (char l = 'A'; l <= 'J'; ++l) scores[std::string(1, l)] = unit(rng);
    std::vector<int> cands(10);
    for (int i = 0; i < 10; ++i) cands[static_cast<std::size_t>(i)] = i + 1;
    CandidateSlate slate = CandidateSlate::make(1, cands);
    auto backend = std::make_shared<ScriptedBackend>(scores);
    Gateway gw(backend, nullptr);
    ChatRequest req = build_prompt(fx.lib, RankerVariant::kPlain, {11}, 10, slate,
                                   fx.dataset, nullptr);
    RankingResult r = rank_slate(req, slate, gw);
    std::vector<int> sorted = r.permutation;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 10; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
    // Scores are non-increasing along the permutation.
    for (int i = 1; i < 10; ++i) {
      CHECK(r.scores[static_cast<std::size_t>(r.permutation[static_cast<std::size_t>(i - 1)])] >=
            r.scores[static_cast<std::size_t>(r.permutation[static_cast<std::size_t>(i)])]);
    }
  }
}

TEST_CASE("llm slate ranker works end to end and records transcripts") {
  RankerFixture fx;
  auto backend = std::make_shared<MockBackend>(MockConfig{19, 32, 0.05});
  Gateway gw(backend, nullptr);

  std::map<int, std::vector<int>> seqs;
  SplitSpec splits = split_leave_one_out(fx.dataset);
  for (int u = 1; u <= fx.dataset.num_users(); ++u) {
    seqs[u] = splits.users.at(static_cast<std::size_t>(u)).train;
  }

  RankerConfig rc;
  rc.variant = RankerVariant::kPlain;
  rc.slate_size = 5;
  rc.history_len = 3;
  LlmSlateRanker ranker(gw, fx.lib, fx.dataset, rc, nullptr, seqs);

  CandidateSlate slate = CandidateSlate::make(1, {1, 2, 3, 4, 5}, 4);
  RankingResult r = ranker.rank(slate);
  REQUIRE(r.permutation.size() == 5);
  REQUIRE(ranker.transcripts().size() == 1);
  // Copy: the second rank() below may reallocate the transcript vector.
  RankTranscript t = ranker.transcripts()[0];
  CHECK(t.user == 1);
  CHECK(t.variant == "plain");
  CHECK(t.labels == "ABCDE");
  CHECK(t.candidate_ids == slate.candidates);
  REQUIRE(t.permutation.size() == 5);
  // Persisted permutation is 1-based.
  CHECK(t.permutation[0] == r.permutation[0] + 1);

  // Deterministic mock: same slate, same result.
  RankingResult r2 = ranker.rank(slate);
  CHECK(r2.permutation == r.permutation);

  // Round-trip through disk.
  const auto dir = testworld::fresh_temp_dir("rank-tr");
  save_rank_transcripts(dir / "t.jsonl", ranker.transcripts());
  auto loaded = load_rank_transcripts(dir / "t.jsonl");
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].user == t.user);
  CHECK(loaded[0].labels == t.labels);
  CHECK(loaded[0].candidate_ids == t.candidate_ids);
  CHECK(loaded[0].permutation == t.permutation);
  CHECK(loaded[0].fallback_used == t.fallback_used);
  std::filesystem::remove_all(dir);

  // Unknown user in input_seqs is a configuration error.
  CandidateSlate other = CandidateSlate::make(999, {1, 2, 3, 4, 5});
  CHECK_THROWS_AS(ranker.rank(other), ConfigError);
}

TEST_CASE("plain and enriched slates agree on membership") {
  RankerFixture fx;
  auto backend = std::make_shared<MockBackend>(MockConfig{19, 32, 0.05});
  Gateway gw(backend, nullptr);
  SplitSpec splits = split_leave_one_out(fx.dataset);

  // Train a tiny retriever so rank_user has real scores to slate from.
  ModelConfig mc;
  mc.d_crm = 8;
  mc.blocks = 1;
  mc.heads = 1;
  mc.max_len = 6;
  mc.epochs = 2;
  mc.batch_size = 16;
  mc.use_user_slot = false;
  RetrieverParams params = train_retriever(fx.dataset, splits, mc, nullptr, nullptr);

  std::vector<int> input = splits.users.at(1).train;

  std::vector<UserPreference> prefs = {{1, "loves cluster zero", 1}};
  std::vector<ItemPerception> percs;
  for (int i = 1; i <= fx.dataset.num_items(); ++i) {
    percs.push_back({1, i, "d", "r", {"k1", "k2", "k3"}});
  }
  ExtractionArtifacts art = ExtractionArtifacts::index(prefs, percs);

  RankUserOutput plain = rank_user(1, params, input, RankerVariant::kPlain, 5, 3,
                                   fx.lib, fx.dataset, nullptr, gw);
  RankUserOutput enriched = rank_user(1, params, input, RankerVariant::kEnriched, 5, 3,
                                      fx.lib, fx.dataset, &art, gw);
  CHECK(plain.slate.candidates == enriched.slate.candidates);
  REQUIRE(plain.result.permutation.size() == 5);
  REQUIRE(enriched.result.permutation.size() == 5);

  // The slate itself excludes the user's input items.
  for (int c : plain.slate.candidates) {
    CHECK(std::find(input.begin(), input.end(), c) == input.end());
  }
}

TEST_CASE("variant names round-trip") {
  CHECK(to_string(RankerVariant::kPlain) == "plain");
  CHECK(to_string(RankerVariant::kEnriched) == "enriched");
  CHECK(ranker_variant_from_string("plain") == RankerVariant::kPlain);
  CHECK(ranker_variant_from_string("enriched") == RankerVariant::kEnriched);
  CHECK_THROWS_AS(ranker_variant_from_string("bogus"), ConfigError);
}
