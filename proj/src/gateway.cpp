#include "cotrec/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "cotrec/error.hpp"
#include "cotrec/hash.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

namespace {

std::vector<std::string> find_all(const std::string& text, const std::regex& re,
                                  std::size_t cap) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), re);
       it != std::sregex_iterator() && out.size() < cap; ++it) {
    std::string m = it->str();
    if (seen.insert(m).second) out.push_back(std::move(m));
  }
  return out;
}

const std::regex kRefRe(R"(\[#[0-9a-f]{8}\])");
const std::regex kClusterRe(R"(\[cluster [0-9]+\])");
const std::regex kClusterNumRe(R"(\[cluster ([0-9]+)\])");

}  // namespace

nlohmann::json canonical_chat(const ChatRequest& req) {
  nlohmann::json j;
  j["system"] = req.system_prompt;
  j["user"] = req.user_prompt;
  j["temperature"] = req.temperature;
  j["max_tokens"] = req.max_tokens;
  j["label_set"] = req.label_set;
  return j;
}

std::string chat_cache_key(const std::string& backend_id, const ChatRequest& req) {
  return sha256_hex("chat|" + backend_id + "|" + canonical_chat(req).dump());
}

std::string embed_cache_key(const std::string& backend_id,
                            const std::vector<std::string>& texts) {
  return sha256_hex("embed|" + backend_id + "|" + nlohmann::json(texts).dump());
}

nlohmann::json chat_response_to_json(const ChatResponse& r) {
  nlohmann::json j;
  j["text"] = r.text;
  j["label_scores"] = r.label_scores;
  return j;
}

ChatResponse chat_response_from_json(const nlohmann::json& j) {
  ChatResponse r;
  r.text = j.at("text").get<std::string>();
  if (j.contains("label_scores")) {
    for (const auto& [k, v] : j.at("label_scores").items()) {
      r.label_scores[k] = v.get<double>();
    }
  }
  return r;
}

nlohmann::json embed_response_to_json(const EmbedResponse& r) {
  nlohmann::json j;
  j["vectors"] = r.vectors;
  return j;
}

EmbedResponse embed_response_from_json(const nlohmann::json& j) {
  EmbedResponse r;
  r.vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
  return r;
}

// ---------------------------------------------------------------------------
// MockBackend

std::string MockBackend::id() const {
  return "mock-" + std::to_string(cfg_.seed) + "-d" + std::to_string(cfg_.d_lm);
}

ChatResponse MockBackend::chat(const ChatRequest& req) {
  const std::string canon = canonical_chat(req).dump();
  const std::string digest =
      sha256_hex8("mockchat|" + std::to_string(cfg_.seed) + "|" + canon);

  ChatResponse resp;
  if (!req.label_set.empty()) {
    std::string best;
    double best_score = -1.0;
    for (const auto& label : req.label_set) {
      double s = stable_unit(digest + "|" + label);
      resp.label_scores[label] = s;
      if (s > best_score) {
        best_score = s;
        best = label;
      }
    }
    resp.text = best;
    return resp;
  }

  if (req.system_prompt.find("semicolons") != std::string::npos) {
    // Keyword mode: short phrases joined by "; ".
    std::vector<std::string> phrases;
    phrases.push_back("key#" + digest.substr(0, 6));
    for (const auto& tag : find_all(req.user_prompt, kClusterNumRe, 4)) {
      std::smatch m;
      std::regex_search(tag, m, kClusterNumRe);
      phrases.push_back("cluster " + m[1].str());
    }
    std::size_t want = 3 + static_cast<std::size_t>(stable_u64(digest + "|n") % 8);
    for (std::size_t i = 0; phrases.size() < want; ++i) {
      std::string filler = sha256_hex8(digest + "|p" + std::to_string(i));
      phrases.push_back((i % 2 == 0 ? "note#" : "mood#") + filler.substr(0, 4));
    }
    std::ostringstream os;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
      if (i) os << "; ";
      os << phrases[i];
    }
    resp.text = os.str();
    return resp;
  }

  // Generic mode: stable marker line plus echoes of recognizable content.
  std::ostringstream os;
  os << "GEN[#" << digest << "]";

  std::vector<std::string> items;
  {
    std::istringstream is(req.user_prompt);
    std::string line;
    while (items.size() < 5 && std::getline(is, line)) {
      if (line.rfind("- ", 0) == 0) items.push_back(line.substr(2));
    }
  }
  if (!items.empty()) {
    os << "\nitems: ";
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (i) os << " | ";
      os << items[i];
    }
  }
  auto refs = find_all(req.user_prompt, kRefRe, 12);
  if (!refs.empty()) {
    os << "\nrefs: ";
    for (std::size_t i = 0; i < refs.size(); ++i) {
      if (i) os << " ";
      os << refs[i];
    }
  }
  auto tags = find_all(req.user_prompt, kClusterRe, 8);
  if (!tags.empty()) {
    os << "\ntags: ";
    for (std::size_t i = 0; i < tags.size(); ++i) {
      if (i) os << " ";
      os << tags[i];
    }
  }
  resp.text = os.str();
  return resp;
}

EmbedResponse MockBackend::embed(const std::vector<std::string>& texts) {
  EmbedResponse out;
  out.vectors.reserve(texts.size());
  const int d = cfg_.d_lm;
  for (const auto& text : texts) {
    // Deterministic noise stream in [-1, 1).
    std::vector<double> noise(d);
    const std::string base = "mockembed|" + std::to_string(cfg_.seed) + "|" + text;
    for (int i = 0; i < d; i += 4) {
      auto block = sha256(base + "|" + std::to_string(i / 4));
      for (int k = 0; k < 4 && i + k < d; ++k) {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) {
          v = (v << 8) | block[static_cast<std::size_t>(8 * k + b)];
        }
        noise[i + k] =
            2.0 * (static_cast<double>(v >> 11) / 9007199254740992.0) - 1.0;
      }
    }
    double nn = 0.0;
    for (double x : noise) nn += x * x;
    nn = std::sqrt(std::max(nn, 1e-30));
    for (double& x : noise) x /= nn;

    std::vector<double> v(d, 0.0);
    std::set<int> axes;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), kClusterNumRe);
         it != std::sregex_iterator(); ++it) {
      axes.insert(std::stoi((*it)[1].str()) % d);
    }
    if (axes.empty()) {
      v = noise;
    } else {
      for (int a : axes) v[a] += 1.0 / static_cast<double>(axes.size());
      for (int i = 0; i < d; ++i) v[i] += cfg_.tag_noise * noise[i];
    }
    double n2 = 0.0;
    for (double x : v) n2 += x * x;
    n2 = std::sqrt(std::max(n2, 1e-30));
    for (double& x : v) x /= n2;
    out.vectors.push_back(std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// HttpBackend

namespace {

// Issues one POST and maps transport/status failures onto the error
// taxonomy: retry-worthy conditions raise TransientError, the rest
// TransportError.
nlohmann::json http_post_json(const HttpBackendConfig& cfg, const std::string& path,
                              const nlohmann::json& body) {
  httplib::Client client(cfg.base_url);
  client.set_connection_timeout(cfg.timeout_seconds, 0);
  client.set_read_timeout(cfg.timeout_seconds, 0);
  client.set_write_timeout(cfg.timeout_seconds, 0);
  httplib::Headers headers;
  if (!cfg.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + cfg.api_key);
  }
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw TransientError("no response from " + cfg.base_url + path + " (" +
                         httplib::to_string(res.error()) + ")");
  }
  if (res->status == 429 || res->status >= 500) {
    throw TransientError("HTTP " + std::to_string(res->status) + " from " + path +
                         ": " + res->body.substr(0, 200));
  }
  if (res->status != 200) {
    throw TransportError("HTTP " + std::to_string(res->status) + " from " + path +
                         ": " + res->body.substr(0, 200));
  }
  nlohmann::json j = nlohmann::json::parse(res->body, nullptr, false);
  if (j.is_discarded()) {
    throw TransportError("invalid JSON from " + path);
  }
  return j;
}

std::string trim_copy(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string HttpBackend::id() const {
  return "http-" + cfg_.model + "@" + cfg_.base_url;
}

ChatResponse HttpBackend::chat(const ChatRequest& req) {
  nlohmann::json body;
  body["model"] = cfg_.model;
  body["messages"] = nlohmann::json::array({
      nlohmann::json{{"role", "system"}, {"content", req.system_prompt}},
      nlohmann::json{{"role", "user"}, {"content", req.user_prompt}},
  });
  body["temperature"] = req.temperature;
  if (req.label_set.empty()) {
    body["max_tokens"] = req.max_tokens;
  } else {
    // One token is enough to score the candidate labels.
    body["max_tokens"] = 1;
    body["logprobs"] = true;
    body["top_logprobs"] = 20;
  }

  nlohmann::json j = http_post_json(cfg_, cfg_.chat_path, body);
  ChatResponse resp;
  try {
    const auto& choice = j.at("choices").at(0);
    resp.text = choice.at("message").at("content").get<std::string>();
    if (!req.label_set.empty()) {
      if (!choice.contains("logprobs") || choice["logprobs"].is_null()) {
        throw CapabilityError(
            "backend returned no token log-probabilities; label scoring "
            "requires top_logprobs support");
      }
      std::map<std::string, double> token_prob;
      const auto& content = choice.at("logprobs").at("content");
      if (content.empty()) {
        throw CapabilityError("backend returned empty logprobs content");
      }
      for (const auto& alt : content.at(0).at("top_logprobs")) {
        std::string tok = trim_copy(alt.at("token").get<std::string>());
        double p = std::exp(alt.at("logprob").get<double>());
        auto [it, inserted] = token_prob.emplace(tok, p);
        if (!inserted) it->second = std::max(it->second, p);
      }
      for (const auto& label : req.label_set) {
        auto it = token_prob.find(label);
        resp.label_scores[label] = (it == token_prob.end()) ? 0.0 : it->second;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed chat response: ") + e.what());
  }
  return resp;
}

EmbedResponse HttpBackend::embed(const std::vector<std::string>& texts) {
  nlohmann::json body;
  body["model"] = cfg_.embed_model.empty() ? cfg_.model : cfg_.embed_model;
  body["input"] = texts;
  nlohmann::json j = http_post_json(cfg_, cfg_.embed_path, body);
  EmbedResponse resp;
  try {
    std::vector<std::pair<int, std::vector<double>>> rows;
    for (const auto& row : j.at("data")) {
      rows.emplace_back(row.at("index").get<int>(),
                        row.at("embedding").get<std::vector<double>>());
    }
    std::sort(rows.begin(), rows.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [idx, vec] : rows) resp.vectors.push_back(std::move(vec));
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed embeddings response: ") + e.what());
  }
  if (resp.vectors.size() != texts.size()) {
    throw TransportError("embeddings response count mismatch: expected " +
                         std::to_string(texts.size()) + ", got " +
                         std::to_string(resp.vectors.size()));
  }
  return resp;
}

// ---------------------------------------------------------------------------
// DiskCache

DiskCache::DiskCache(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::optional<std::string> DiskCache::load(const std::string& key) const {
  auto path = dir_ / key;
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return std::nullopt;
  return read_file(path);
}

void DiskCache::store(const std::string& key, const std::string& payload) const {
  atomic_write_file(dir_ / key, payload);
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(std::shared_ptr<TextBackend> backend, std::shared_ptr<DiskCache> cache,
                 GatewayConfig cfg, std::function<void(int)> sleep_fn)
    : backend_(std::move(backend)),
      cache_(std::move(cache)),
      cfg_(cfg),
      sleep_(std::move(sleep_fn)),
      backend_id_(backend_->id()),
      free_slots_(std::max(1, cfg.max_in_flight)) {
  if (!sleep_) {
    sleep_ = [](int ms) {
      std::this_thread::sleep_for(std::chrono::milliseconds(ms));
    };
  }
}

namespace {

class SlotGuard {
 public:
  SlotGuard(std::mutex& m, std::condition_variable& cv, int& slots)
      : m_(m), cv_(cv), slots_(slots) {
    std::unique_lock<std::mutex> lock(m_);
    cv_.wait(lock, [&] { return slots_ > 0; });
    --slots_;
  }
  ~SlotGuard() {
    {
      std::lock_guard<std::mutex> lock(m_);
      ++slots_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex& m_;
  std::condition_variable& cv_;
  int& slots_;
};

}  // namespace

std::string Gateway::call_with_retry(const std::string& what,
                                     const std::function<std::string()>& attempt) {
  for (int n = 1;; ++n) {
    try {
      return attempt();
    } catch (const TransientError& e) {
      if (n >= cfg_.max_attempts) {
        throw TransportError(what + " failed after " + std::to_string(n) +
                             " attempts: " + e.what());
      }
      double base = cfg_.backoff_initial_ms * std::pow(2.0, n - 1);
      double u = stable_unit(what + "|attempt" + std::to_string(n));
      double jitter = 1.0 + cfg_.backoff_jitter * (2.0 * u - 1.0);
      sleep_(static_cast<int>(base * jitter));
    }
  }
}

ChatResponse Gateway::chat(const ChatRequest& req) {
  chat_calls_.fetch_add(1);
  const std::string key = chat_cache_key(backend_id_, req);
  if (cache_) {
    if (auto hit = cache_->load(key)) {
      cache_hits_.fetch_add(1);
      return chat_response_from_json(nlohmann::json::parse(*hit));
    }
  }
  SlotGuard guard(slots_mutex_, slots_cv_, free_slots_);
  std::string payload = call_with_retry("chat " + key.substr(0, 8), [&] {
    backend_calls_.fetch_add(1);
    return chat_response_to_json(backend_->chat(req)).dump();
  });
  if (cache_) cache_->store(key, payload);
  return chat_response_from_json(nlohmann::json::parse(payload));
}

EmbedResponse Gateway::embed(const std::vector<std::string>& texts) {
  embed_calls_.fetch_add(1);
  const std::string key = embed_cache_key(backend_id_, texts);
  if (cache_) {
    if (auto hit = cache_->load(key)) {
      cache_hits_.fetch_add(1);
      return embed_response_from_json(nlohmann::json::parse(*hit));
    }
  }
  SlotGuard guard(slots_mutex_, slots_cv_, free_slots_);
  std::string payload = call_with_retry("embed " + key.substr(0, 8), [&] {
    backend_calls_.fetch_add(1);
    return embed_response_to_json(backend_->embed(texts)).dump();
  });
  if (cache_) cache_->store(key, payload);
  return embed_response_from_json(nlohmann::json::parse(payload));
}

GatewayStats Gateway::stats() const {
  GatewayStats s;
  s.chat_calls = chat_calls_.load();
  s.embed_calls = embed_calls_.load();
  s.backend_calls = backend_calls_.load();
  s.cache_hits = cache_hits_.load();
  return s;
}

}  // namespace cotrec
