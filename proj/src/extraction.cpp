#include "cotrec/extraction.hpp"

#include <algorithm>
#include <regex>
#include <set>
#include <sstream>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

BatchPlan plan_batches(std::size_t n, std::size_t batch_size, std::size_t overlap) {
  if (batch_size == 0 || overlap >= batch_size) {
    throw ConfigError("plan_batches: need 0 <= overlap < batch_size, got batch_size=" +
                      std::to_string(batch_size) + " overlap=" + std::to_string(overlap));
  }
  if (n == 0) {
    throw ConfigError("plan_batches: sequence length must be >= 1");
  }
  BatchPlan plan;
  plan.batch_size = batch_size;
  plan.overlap = overlap;
  const std::size_t step = batch_size - overlap;
  for (std::size_t start = 0;; start += step) {
    std::size_t end = std::min(start + batch_size, n);
    plan.windows.emplace_back(start, end);
    if (end >= n) break;
  }
  return plan;
}

std::string item_prompt_line(int item, const ItemMeta& meta) {
  return "- [i" + std::to_string(item) + "] " + meta.caption;
}

std::vector<std::string> parse_keyword_line(const std::string& line,
                                            std::size_t max_keep) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::size_t pos = 0;
  while (pos <= line.size()) {
    std::size_t semi = line.find(';', pos);
    std::string piece =
        (semi == std::string::npos) ? line.substr(pos) : line.substr(pos, semi - pos);
    std::size_t a = piece.find_first_not_of(" \t\r\n");
    if (a != std::string::npos) {
      std::size_t b = piece.find_last_not_of(" \t\r\n");
      std::string phrase = piece.substr(a, b - a + 1);
      if (seen.insert(phrase).second && out.size() < max_keep) {
        out.push_back(std::move(phrase));
      }
    }
    if (semi == std::string::npos) break;
    pos = semi + 1;
  }
  return out;
}

namespace {

// Counts raw (pre-dedup) non-blank phrases in a semicolon-delimited line.
std::size_t raw_phrase_count(const std::string& line) {
  std::size_t count = 0, pos = 0;
  while (pos <= line.size()) {
    std::size_t semi = line.find(';', pos);
    std::string piece =
        (semi == std::string::npos) ? line.substr(pos) : line.substr(pos, semi - pos);
    if (piece.find_first_not_of(" \t\r\n") != std::string::npos) ++count;
    if (semi == std::string::npos) break;
    pos = semi + 1;
  }
  return count;
}

}  // namespace

Extractor::Extractor(Gateway& gateway, PromptLibrary prompts, ExtractionConfig cfg)
    : gateway_(gateway), prompts_(std::move(prompts)), cfg_(cfg) {
  if (cfg_.overlap >= cfg_.batch_size) {
    throw ConfigError("extraction: overlap must be smaller than batch size");
  }
  if (cfg_.keywords_min == 0 || cfg_.keywords_min > cfg_.keywords_max) {
    throw ConfigError("extraction: need 1 <= keywords_min <= keywords_max");
  }
}

std::string Extractor::run_chat(const std::string& op, int user, int item,
                                const ChatRequest& req) {
  ChatResponse resp = gateway_.chat(req);
  transcripts_.push_back({op, user, item, req.system_prompt, req.user_prompt, resp.text});
  return resp.text;
}

ShortTermInterest Extractor::summarize_batch(
    int user, std::size_t window_index, const std::vector<int>& window_items,
    const Dataset& dataset, const std::optional<UserPreference>& prior) {
  if (window_items.empty()) {
    throw ConfigError("summarize_batch: empty item window for user " +
                      std::to_string(user));
  }
  std::ostringstream lines;
  for (std::size_t i = 0; i < window_items.size(); ++i) {
    if (i) lines << "\n";
    lines << item_prompt_line(window_items[i], dataset.meta(window_items[i]));
  }
  ChatRequest req;
  if (prior.has_value()) {
    req = prompts_.render("summarize_with_prior",
                          {{"prior", prior->text}, {"items", lines.str()}}, 0.0,
                          cfg_.max_tokens);
  } else {
    req = prompts_.render("summarize", {{"items", lines.str()}}, 0.0, cfg_.max_tokens);
  }
  ShortTermInterest s;
  s.user_id = user;
  s.window_index = window_index;
  s.text = run_chat("summarize", user, 0, req);
  if (s.text.empty()) {
    throw ExtractionError("summarize_batch: backend returned empty summary for user " +
                          std::to_string(user));
  }
  return s;
}

UserPreference Extractor::merge_preference(const UserPreference& long_term,
                                           const ShortTermInterest& short_term) {
  if (long_term.revision < 1 || long_term.text.empty()) {
    throw ConfigError("merge_preference: long-term preference not initialized for user " +
                      std::to_string(long_term.user_id));
  }
  if (short_term.text.empty()) {
    throw ConfigError("merge_preference: empty short-term interest for user " +
                      std::to_string(short_term.user_id));
  }
  ChatRequest req = prompts_.render(
      "merge", {{"long", long_term.text}, {"short", short_term.text}}, 0.0,
      cfg_.max_tokens);
  UserPreference out;
  out.user_id = long_term.user_id;
  out.text = run_chat("merge", long_term.user_id, 0, req);
  out.revision = long_term.revision + 1;
  if (out.text.empty()) {
    throw ExtractionError("merge_preference: backend returned empty text for user " +
                          std::to_string(long_term.user_id));
  }
  return out;
}

UserPreference Extractor::maintain_preference(int user,
                                              const std::vector<int>& train_items,
                                              const Dataset& dataset) {
  BatchPlan plan = plan_batches(train_items.size(), cfg_.batch_size, cfg_.overlap);
  std::optional<UserPreference> pref;
  for (std::size_t w = 0; w < plan.windows.size(); ++w) {
    auto [start, end] = plan.windows[w];
    std::vector<int> window(train_items.begin() + static_cast<std::ptrdiff_t>(start),
                            train_items.begin() + static_cast<std::ptrdiff_t>(end));
    std::optional<UserPreference> prior =
        cfg_.summarizer_sees_prior ? pref : std::nullopt;
    ShortTermInterest s = summarize_batch(user, w, window, dataset, prior);
    if (!pref.has_value()) {
      pref = UserPreference{user, s.text, 1};
    } else {
      pref = merge_preference(*pref, s);
    }
  }
  return *pref;
}

std::string Extractor::describe_item(int item, const Dataset& dataset) {
  const ItemMeta& meta = dataset.meta(item);
  if (meta.caption.empty()) {
    throw ConfigError("describe_item: item " + std::to_string(item) +
                      " has an empty caption");
  }
  auto it = description_cache_.find(item);
  if (it != description_cache_.end()) return it->second;
  ChatRequest req = prompts_.render(
      "describe",
      {{"item", "[i" + std::to_string(item) + "] " + meta.caption},
       {"notes", meta.description.empty() ? std::string("none") : meta.description}},
      0.0, cfg_.max_tokens);
  std::string desc = run_chat("describe", 0, item, req);
  if (desc.empty()) {
    throw ExtractionError("describe_item: backend returned empty description for item " +
                          std::to_string(item));
  }
  description_cache_.emplace(item, desc);
  return desc;
}

std::string Extractor::roleplay_review(const UserPreference& pref, int item,
                                       const Dataset& dataset,
                                       const std::string& description) {
  if (pref.revision < 1 || pref.text.empty()) {
    throw ConfigError("roleplay_review: preference not initialized for user " +
                      std::to_string(pref.user_id));
  }
  const ItemMeta& meta = dataset.meta(item);
  ChatRequest req = prompts_.render(
      "review",
      {{"preference", pref.text},
       {"item", "[i" + std::to_string(item) + "] " + meta.caption},
       {"description", description}},
      0.0, cfg_.max_tokens);
  std::string review = run_chat("review", pref.user_id, item, req);
  if (review.empty()) {
    throw ExtractionError("roleplay_review: backend returned empty review");
  }
  return review;
}

std::vector<std::string> Extractor::extract_keywords(const std::string& review) {
  if (review.empty()) {
    throw ConfigError("extract_keywords: empty review text");
  }
  ChatRequest req = prompts_.render("keywords", {{"review", review}}, 0.0, 128);
  // The minimum applies to the raw phrase count; deduplication may shrink
  // the final list below it without constituting a parse failure.
  std::string line = run_chat("keywords", 0, 0, req);
  if (raw_phrase_count(line) < cfg_.keywords_min) {
    ChatRequest retry = req;
    retry.user_prompt += "\n\nYour previous answer was not parseable. Respond with one "
                         "line of at least " +
                         std::to_string(cfg_.keywords_min) +
                         " short phrases separated by semicolons.";
    line = run_chat("keywords", 0, 0, retry);
    if (raw_phrase_count(line) < cfg_.keywords_min) {
      throw ExtractionError("extract_keywords: unparseable keyword line after one "
                            "reprompt: \"" +
                            line.substr(0, 120) + "\"");
    }
  }
  return parse_keyword_line(line, cfg_.keywords_max);
}

ItemPerception Extractor::perceive_item(const UserPreference& pref, int item,
                                        const Dataset& dataset) {
  ItemPerception p;
  p.user_id = pref.user_id;
  p.item_id = item;
  auto context = [&](int step, const char* name) {
    return "perceive_item step " + std::to_string(step) + " (" + name + ") for user " +
           std::to_string(pref.user_id) + " item " + std::to_string(item);
  };
  try {
    p.objective_description = describe_item(item, dataset);
  } catch (const Error& e) {
    throw ExtractionError(context(1, "describe") + ": " + e.what());
  }
  try {
    p.simulated_review = roleplay_review(pref, item, dataset, p.objective_description);
  } catch (const Error& e) {
    throw ExtractionError(context(2, "review") + ": " + e.what());
  }
  try {
    // Keyword transcripts are attributed to the (user, item) pair whose
    // perception they belong to.
    std::size_t first = transcripts_.size();
    p.keywords = extract_keywords(p.simulated_review);
    for (std::size_t i = first; i < transcripts_.size(); ++i) {
      if (transcripts_[i].op == "keywords") {
        transcripts_[i].user_id = pref.user_id;
        transcripts_[i].item_id = item;
      }
    }
  } catch (const Error& e) {
    throw ExtractionError(context(3, "keywords") + ": " + e.what());
  }
  return p;
}

std::vector<UserPreference> extract_all_preferences(
    Extractor& ex, const Dataset& dataset, const SplitSpec& splits,
    const std::vector<UserPreference>& existing) {
  std::map<int, UserPreference> done;
  for (const auto& p : existing) done[p.user_id] = p;
  for (int u = 1; u <= dataset.num_users(); ++u) {
    if (done.count(u)) continue;
    const UserSplit& split = splits.users.at(static_cast<std::size_t>(u));
    done[u] = ex.maintain_preference(u, split.train, dataset);
  }
  std::vector<UserPreference> out;
  out.reserve(done.size());
  for (auto& [u, p] : done) out.push_back(std::move(p));
  return out;
}

std::vector<ItemPerception> extract_all_perceptions(
    Extractor& ex, const Dataset& dataset,
    const std::vector<UserPreference>& preferences,
    const std::vector<std::pair<int, int>>& pairs,
    const std::vector<ItemPerception>& existing) {
  std::map<int, const UserPreference*> pref_by_user;
  for (const auto& p : preferences) pref_by_user[p.user_id] = &p;

  std::map<std::pair<int, int>, ItemPerception> done;
  for (const auto& p : existing) done[{p.user_id, p.item_id}] = p;

  std::set<std::pair<int, int>> wanted(pairs.begin(), pairs.end());
  for (const auto& key : wanted) {
    if (done.count(key)) continue;
    auto it = pref_by_user.find(key.first);
    if (it == pref_by_user.end()) {
      throw ConfigError("perception requested for user " + std::to_string(key.first) +
                        " but no preference was extracted for them");
    }
    done[key] = ex.perceive_item(*it->second, key.second, dataset);
  }
  std::vector<ItemPerception> out;
  out.reserve(done.size());
  for (auto& [key, p] : done) out.push_back(std::move(p));
  return out;
}

LeakageReport scan_transcripts_for_leakage(const std::vector<TranscriptRecord>& records,
                                           const Dataset& dataset,
                                           const SplitSpec& splits) {
  static const std::regex kTagRe(R"(\[i([0-9]+)\])");
  // Held-out (val + test) item set per user.
  std::vector<std::set<int>> heldout(static_cast<std::size_t>(dataset.num_users()) + 1);
  for (int u = 1; u <= dataset.num_users(); ++u) {
    const UserSplit& s = splits.users.at(static_cast<std::size_t>(u));
    heldout[static_cast<std::size_t>(u)].insert(s.val);
    heldout[static_cast<std::size_t>(u)].insert(s.test);
  }

  LeakageReport report;
  for (const auto& rec : records) {
    ++report.records_scanned;
    if (rec.user_id <= 0 || rec.user_id > dataset.num_users()) continue;
    const auto& banned = heldout[static_cast<std::size_t>(rec.user_id)];
    const bool subject_exempt =
        rec.op == "describe" || rec.op == "review" || rec.op == "keywords";
    const std::string text = rec.system_prompt + "\n" + rec.user_prompt;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), kTagRe);
         it != std::sregex_iterator(); ++it) {
      int id = std::stoi((*it)[1].str());
      if (!banned.count(id)) continue;
      if (subject_exempt && id == rec.item_id) continue;
      ++report.violations;
      if (report.details.size() < 20) {
        report.details.push_back("op=" + rec.op + " user=" + std::to_string(rec.user_id) +
                                 " leaked held-out item tag [i" + std::to_string(id) +
                                 "]");
      }
    }
  }
  return report;
}

void save_preferences(const std::filesystem::path& path,
                      const std::vector<UserPreference>& prefs) {
  std::vector<Json> rows;
  rows.reserve(prefs.size());
  for (const auto& p : prefs) {
    rows.push_back(Json{{"user_id", p.user_id}, {"text", p.text}, {"revision", p.revision}});
  }
  write_jsonl(path, rows);
}

std::vector<UserPreference> load_preferences(const std::filesystem::path& path) {
  std::vector<UserPreference> out;
  for_each_jsonl(path, [&](std::size_t, const Json& j) {
    UserPreference p;
    p.user_id = j.at("user_id").get<int>();
    p.text = j.at("text").get<std::string>();
    p.revision = j.at("revision").get<std::uint32_t>();
    out.push_back(std::move(p));
  });
  return out;
}

void save_perceptions(const std::filesystem::path& path,
                      const std::vector<ItemPerception>& percs) {
  std::vector<Json> rows;
  rows.reserve(percs.size());
  for (const auto& p : percs) {
    rows.push_back(Json{{"user_id", p.user_id},
                        {"item_id", p.item_id},
                        {"objective_description", p.objective_description},
                        {"simulated_review", p.simulated_review},
                        {"keywords", p.keywords}});
  }
  write_jsonl(path, rows);
}

std::vector<ItemPerception> load_perceptions(const std::filesystem::path& path) {
  std::vector<ItemPerception> out;
  for_each_jsonl(path, [&](std::size_t, const Json& j) {
    ItemPerception p;
    p.user_id = j.at("user_id").get<int>();
    p.item_id = j.at("item_id").get<int>();
    p.objective_description = j.at("objective_description").get<std::string>();
    p.simulated_review = j.at("simulated_review").get<std::string>();
    p.keywords = j.at("keywords").get<std::vector<std::string>>();
    out.push_back(std::move(p));
  });
  return out;
}

void save_transcripts(const std::filesystem::path& path,
                      const std::vector<TranscriptRecord>& records) {
  std::vector<Json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) {
    rows.push_back(Json{{"op", r.op},
                        {"user_id", r.user_id},
                        {"item_id", r.item_id},
                        {"system", r.system_prompt},
                        {"user", r.user_prompt},
                        {"response", r.response}});
  }
  write_jsonl(path, rows);
}

std::vector<TranscriptRecord> load_transcripts(const std::filesystem::path& path) {
  std::vector<TranscriptRecord> out;
  for_each_jsonl(path, [&](std::size_t, const Json& j) {
    TranscriptRecord r;
    r.op = j.at("op").get<std::string>();
    r.user_id = j.at("user_id").get<int>();
    r.item_id = j.at("item_id").get<int>();
    r.system_prompt = j.at("system").get<std::string>();
    r.user_prompt = j.at("user").get<std::string>();
    r.response = j.at("response").get<std::string>();
    out.push_back(std::move(r));
  });
  return out;
}

}  // namespace cotrec
