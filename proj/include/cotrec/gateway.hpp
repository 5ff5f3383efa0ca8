#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cotrec {

// One text-generation call. `label_set`, when non-empty, asks the backend
// for a per-label score over the listed single-token index labels.
struct ChatRequest {
  std::string system_prompt;
  std::string user_prompt;
  double temperature = 0.0;
  int max_tokens = 512;
  std::vector<std::string> label_set;
};

struct ChatResponse {
  std::string text;
  // Present iff label_set was requested; covers exactly the requested labels.
  std::map<std::string, double> label_scores;
};

struct EmbedResponse {
  std::vector<std::vector<double>> vectors;  // one per input text, dim d_LM
};

// Canonical serializations. Cache keys and the mock derive from these, so
// the byte layout must stay stable.
nlohmann::json canonical_chat(const ChatRequest& req);
std::string chat_cache_key(const std::string& backend_id, const ChatRequest& req);
std::string embed_cache_key(const std::string& backend_id, const std::vector<std::string>& texts);

nlohmann::json chat_response_to_json(const ChatResponse& r);
ChatResponse chat_response_from_json(const nlohmann::json& j);
nlohmann::json embed_response_to_json(const EmbedResponse& r);
EmbedResponse embed_response_from_json(const nlohmann::json& j);

class TextBackend {
 public:
  virtual ~TextBackend() = default;
  virtual std::string id() const = 0;
  virtual ChatResponse chat(const ChatRequest& req) = 0;
  virtual EmbedResponse embed(const std::vector<std::string>& texts) = 0;
};

// Deterministic stand-in backend: every output is a pure function of
// (seed, request). Generated text is a canonical template carrying a short
// digest of the prompt plus echoes of recognizable prompt content
// ("- item" lines, [#hex8] digest markers, [cluster N] tags), so
// containment and propagation tests are meaningful.
//
// Embeddings are unit vectors derived from a hash of the text; texts that
// carry [cluster N] tags are instead mapped near the axis e_{N mod d_lm},
// perturbed by `tag_noise` of hash noise.
struct MockConfig {
  std::uint64_t seed = 0;
  int d_lm = 256;
  double tag_noise = 0.05;
};

class MockBackend : public TextBackend {
 public:
  explicit MockBackend(MockConfig cfg = {}) : cfg_(cfg) {}
  std::string id() const override;
  ChatResponse chat(const ChatRequest& req) override;
  EmbedResponse embed(const std::vector<std::string>& texts) override;

 private:
  MockConfig cfg_;
};

// Chat-completions-style HTTP backend (system/user messages in, generated
// text out, first-token top log-probabilities when label scores are
// requested) plus a batch embeddings endpoint.
struct HttpBackendConfig {
  std::string base_url;                        // e.g. "http://localhost:8080"
  std::string model;
  std::string embed_model;
  std::string api_key;                         // empty = no Authorization header
  std::string chat_path = "/v1/chat/completions";
  std::string embed_path = "/v1/embeddings";
  int timeout_seconds = 120;
};

class HttpBackend : public TextBackend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {}
  std::string id() const override;
  ChatResponse chat(const ChatRequest& req) override;
  EmbedResponse embed(const std::vector<std::string>& texts) override;

 private:
  HttpBackendConfig cfg_;
};

// Content-addressed response cache: one file per key, named by the hex key.
// Writers stage to a temp file and rename, so concurrent readers always see
// complete entries.
class DiskCache {
 public:
  explicit DiskCache(std::filesystem::path dir);
  std::optional<std::string> load(const std::string& key) const;
  void store(const std::string& key, const std::string& payload) const;
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

struct GatewayConfig {
  int max_attempts = 5;
  int backoff_initial_ms = 1000;
  double backoff_jitter = 0.1;
  int max_in_flight = 8;
};

struct GatewayStats {
  std::uint64_t chat_calls = 0;
  std::uint64_t embed_calls = 0;
  std::uint64_t backend_calls = 0;  // actual backend invocations (cache misses)
  std::uint64_t cache_hits = 0;
};

// Uniform entry point for all LLM traffic: optional persistent cache in
// front of the backend, bounded retries with jittered exponential backoff
// on transient failures, and a bounded in-flight request count. Handles are
// safe to share across threads.
class Gateway {
 public:
  Gateway(std::shared_ptr<TextBackend> backend, std::shared_ptr<DiskCache> cache,
          GatewayConfig cfg = {},
          std::function<void(int /*ms*/)> sleep_fn = {});

  ChatResponse chat(const ChatRequest& req);
  EmbedResponse embed(const std::vector<std::string>& texts);

  GatewayStats stats() const;
  const std::string& backend_id() const { return backend_id_; }

 private:
  std::string call_with_retry(const std::string& what,
                              const std::function<std::string()>& attempt);

  std::shared_ptr<TextBackend> backend_;
  std::shared_ptr<DiskCache> cache_;
  GatewayConfig cfg_;
  std::function<void(int)> sleep_;
  std::string backend_id_;

  std::atomic<std::uint64_t> chat_calls_{0};
  std::atomic<std::uint64_t> embed_calls_{0};
  std::atomic<std::uint64_t> backend_calls_{0};
  std::atomic<std::uint64_t> cache_hits_{0};

  // Runtime-configurable in-flight bound.
  std::mutex slots_mutex_;
  std::condition_variable slots_cv_;
  int free_slots_ = 0;
};

}  // namespace cotrec
