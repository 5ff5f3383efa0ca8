#include "cotrec/ranker.hpp"

#include <algorithm>
#include <cctype>
#include <numeric>
#include <set>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

namespace {

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

void check_bijection(const std::vector<int>& perm, int m) {
  if (static_cast<int>(perm.size()) != m) {
    throw Error("ranking produced a permutation of wrong size");
  }
  std::vector<char> seen(static_cast<std::size_t>(m), 0);
  for (int pos : perm) {
    if (pos < 0 || pos >= m || seen[static_cast<std::size_t>(pos)]) {
      throw Error("ranking produced an invalid permutation");
    }
    seen[static_cast<std::size_t>(pos)] = 1;
  }
}

}  // namespace

std::string to_string(RankerVariant v) {
  return v == RankerVariant::kPlain ? "plain" : "enriched";
}

RankerVariant ranker_variant_from_string(const std::string& s) {
  if (s == "plain") return RankerVariant::kPlain;
  if (s == "enriched") return RankerVariant::kEnriched;
  throw ConfigError("unknown ranker variant '" + s + "' (expected plain|enriched)");
}

CandidateSlate CandidateSlate::make(int user, std::vector<int> candidates,
                                    std::optional<int> target_pos) {
  if (candidates.empty()) {
    throw ConfigError("slate must contain at least one candidate");
  }
  if (candidates.size() > 26) {
    throw ConfigError("slate of " + std::to_string(candidates.size()) +
                      " candidates exhausts the label alphabet (max 26)");
  }
  std::set<int> distinct(candidates.begin(), candidates.end());
  if (distinct.size() != candidates.size()) {
    throw ConfigError("slate candidates must be distinct");
  }
  if (target_pos.has_value() &&
      (*target_pos < 0 || *target_pos >= static_cast<int>(candidates.size()))) {
    throw ConfigError("slate target position out of range");
  }
  CandidateSlate s;
  s.user = user;
  s.candidates = std::move(candidates);
  s.labels.resize(s.candidates.size());
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    s.labels[i] = static_cast<char>('A' + static_cast<int>(i));
  }
  s.target_pos = target_pos;
  return s;
}

ExtractionArtifacts ExtractionArtifacts::index(
    const std::vector<UserPreference>& prefs, const std::vector<ItemPerception>& percs) {
  ExtractionArtifacts a;
  for (const auto& p : prefs) a.preferences[p.user_id] = p;
  for (const auto& p : percs) a.perceptions[{p.user_id, p.item_id}] = p;
  return a;
}

ChatRequest build_prompt(const PromptLibrary& lib, RankerVariant variant,
                         const std::vector<int>& history, int history_len,
                         const CandidateSlate& slate, const Dataset& dataset,
                         const ExtractionArtifacts* artifacts, double temperature,
                         int max_tokens) {
  if (history_len < 0) throw ConfigError("history_len must be >= 0");

  std::vector<std::string> hist_lines;
  const std::size_t h = static_cast<std::size_t>(history_len);
  const std::size_t start = history.size() > h ? history.size() - h : 0;
  for (std::size_t i = start; i < history.size(); ++i) {
    hist_lines.push_back(item_prompt_line(history[i], dataset.meta(history[i])));
  }
  if (hist_lines.empty()) hist_lines.push_back("- (none)");

  const UserPreference* pref = nullptr;
  if (variant == RankerVariant::kEnriched) {
    if (!artifacts) {
      throw ConfigError("enriched ranking requires extraction artifacts");
    }
    auto it = artifacts->preferences.find(slate.user);
    if (it == artifacts->preferences.end()) {
      throw ConfigError("enriched ranking: no preference for user " +
                        std::to_string(slate.user));
    }
    pref = &it->second;
  }

  std::vector<std::string> cand_lines;
  for (std::size_t i = 0; i < slate.candidates.size(); ++i) {
    const int item = slate.candidates[i];
    const ItemMeta& meta = dataset.meta(item);
    std::string line;
    line += slate.labels[i];
    line += ". [i" + std::to_string(item) + "] " + meta.caption;
    if (variant == RankerVariant::kEnriched) {
      auto it = artifacts->perceptions.find({slate.user, item});
      if (it == artifacts->perceptions.end()) {
        throw ConfigError("enriched ranking: missing perception for user " +
                          std::to_string(slate.user) + ", item " + std::to_string(item));
      }
      line += " (keywords: " + join(it->second.keywords, "; ") + ")";
    }
    cand_lines.push_back(std::move(line));
  }

  std::map<std::string, std::string> subs;
  subs["history"] = join(hist_lines, "\n");
  subs["candidates"] = join(cand_lines, "\n");
  std::string tmpl = "rank_plain";
  if (variant == RankerVariant::kEnriched) {
    subs["preference"] = pref->text;
    tmpl = "rank_enriched";
  }
  ChatRequest req = lib.render(tmpl, subs, temperature, max_tokens);
  req.label_set.clear();
  for (char l : slate.labels) req.label_set.push_back(std::string(1, l));
  return req;
}

namespace {

RankingResult fallback_from_text(const std::string& text, const CandidateSlate& slate) {
  const int m = slate.size();
  int parsed = -1;
  for (char c : text) {
    const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (up >= 'A' && up < static_cast<char>('A' + m)) {
      parsed = up - 'A';
      break;
    }
  }
  if (parsed < 0) {
    std::string preview = text.substr(0, 80);
    throw RankingError("fallback ranking: generated text contains no valid label: \"" +
                       preview + "\"");
  }
  RankingResult res;
  res.fallback_used = true;
  res.scores.assign(static_cast<std::size_t>(m), 0.0);
  res.scores[static_cast<std::size_t>(parsed)] = 1.0;
  res.permutation.push_back(parsed);
  for (int i = 0; i < m; ++i) {
    if (i != parsed) res.permutation.push_back(i);
  }
  return res;
}

}  // namespace

RankingResult rank_slate(const ChatRequest& req, const CandidateSlate& slate,
                         Gateway& gateway) {
  const int m = slate.size();
  RankingResult res;
  bool need_fallback = false;
  std::string fallback_text;
  try {
    ChatResponse resp = gateway.chat(req);
    if (resp.label_scores.empty()) {
      need_fallback = true;
      fallback_text = resp.text;
    } else {
      res.scores.assign(static_cast<std::size_t>(m), 0.0);
      for (int i = 0; i < m; ++i) {
        auto it = resp.label_scores.find(std::string(1, slate.labels[static_cast<std::size_t>(i)]));
        if (it != resp.label_scores.end()) res.scores[static_cast<std::size_t>(i)] = it->second;
      }
      res.permutation.resize(static_cast<std::size_t>(m));
      std::iota(res.permutation.begin(), res.permutation.end(), 0);
      std::stable_sort(res.permutation.begin(), res.permutation.end(),
                       [&](int a, int b) {
                         return res.scores[static_cast<std::size_t>(a)] >
                                res.scores[static_cast<std::size_t>(b)];
                       });
    }
  } catch (const CapabilityError&) {
    ChatRequest retry = req;
    retry.label_set.clear();
    fallback_text = gateway.chat(retry).text;
    need_fallback = true;
  }
  if (need_fallback) res = fallback_from_text(fallback_text, slate);
  check_bijection(res.permutation, m);
  return res;
}

void save_rank_transcripts(const std::filesystem::path& path,
                           const std::vector<RankTranscript>& transcripts) {
  std::vector<Json> rows;
  rows.reserve(transcripts.size());
  for (const auto& t : transcripts) {
    Json j;
    j["user"] = t.user;
    j["variant"] = t.variant;
    j["labels"] = t.labels;
    j["candidate_ids"] = t.candidate_ids;
    j["scores"] = t.scores;
    j["permutation"] = t.permutation;
    j["fallback_used"] = t.fallback_used;
    rows.push_back(std::move(j));
  }
  write_jsonl(path, rows);
}

std::vector<RankTranscript> load_rank_transcripts(const std::filesystem::path& path) {
  std::vector<RankTranscript> out;
  for_each_jsonl(path, [&](std::size_t, const Json& j) {
    RankTranscript t;
    t.user = j.at("user").get<int>();
    t.variant = j.at("variant").get<std::string>();
    t.labels = j.at("labels").get<std::string>();
    t.candidate_ids = j.at("candidate_ids").get<std::vector<int>>();
    t.scores = j.at("scores").get<std::vector<double>>();
    t.permutation = j.at("permutation").get<std::vector<int>>();
    t.fallback_used = j.at("fallback_used").get<bool>();
    out.push_back(std::move(t));
  });
  return out;
}

LlmSlateRanker::LlmSlateRanker(Gateway& gateway, const PromptLibrary& lib,
                               const Dataset& dataset, RankerConfig cfg,
                               const ExtractionArtifacts* artifacts,
                               std::map<int, std::vector<int>> input_seqs)
    : gateway_(gateway),
      lib_(lib),
      dataset_(dataset),
      cfg_(cfg),
      artifacts_(artifacts),
      input_seqs_(std::move(input_seqs)) {}

RankingResult LlmSlateRanker::rank(const CandidateSlate& slate) {
  auto it = input_seqs_.find(slate.user);
  if (it == input_seqs_.end()) {
    throw ConfigError("ranker: no input sequence for user " + std::to_string(slate.user));
  }
  ChatRequest req =
      build_prompt(lib_, cfg_.variant, it->second, cfg_.history_len, slate, dataset_,
                   artifacts_, cfg_.temperature, cfg_.max_tokens);
  RankingResult res = rank_slate(req, slate, gateway_);

  RankTranscript t;
  t.user = slate.user;
  t.variant = to_string(cfg_.variant);
  t.labels.assign(slate.labels.begin(), slate.labels.end());
  t.candidate_ids = slate.candidates;
  t.scores = res.scores;
  t.permutation.reserve(res.permutation.size());
  for (int pos : res.permutation) t.permutation.push_back(pos + 1);
  t.fallback_used = res.fallback_used;
  transcripts_.push_back(std::move(t));
  return res;
}

RankUserOutput rank_user(int user, const RetrieverParams& params,
                         const std::vector<int>& input_seq, RankerVariant variant,
                         int slate_size, int history_len, const PromptLibrary& lib,
                         const Dataset& dataset, const ExtractionArtifacts* artifacts,
                         Gateway& gateway) {
  TopK topk = retrieve_topk(params, user, input_seq, slate_size);
  CandidateSlate slate = CandidateSlate::make(user, topk.items);
  ChatRequest req = build_prompt(lib, variant, input_seq, history_len, slate, dataset,
                                 artifacts);
  RankUserOutput out{std::move(slate), {}};
  out.result = rank_slate(req, out.slate, gateway);
  return out;
}

}  // namespace cotrec
