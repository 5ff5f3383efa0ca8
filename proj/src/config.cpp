#include "cotrec/config.hpp"

#include <algorithm>

#include "cotrec/encode_map.hpp"
#include "cotrec/error.hpp"
#include "cotrec/hash.hpp"
#include "cotrec/ranker.hpp"

namespace cotrec {

namespace {

template <typename T>
void maybe(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const Json& j) {
  PipelineConfig c;
  if (j.contains("data")) {
    const Json& d = j.at("data");
    maybe(d, "interactions", c.data.interactions);
    maybe(d, "items", c.data.items);
    maybe(d, "k_core", c.data.k_core);
    maybe(d, "tag", c.data.tag);
  }
  if (j.contains("gateway")) {
    const Json& g = j.at("gateway");
    maybe(g, "mock", c.gateway.mock);
    maybe(g, "endpoint", c.gateway.endpoint);
    maybe(g, "model", c.gateway.model);
    maybe(g, "embed_model", c.gateway.embed_model);
    maybe(g, "api_key_env", c.gateway.api_key_env);
    maybe(g, "cache_dir", c.gateway.cache_dir);
    maybe(g, "max_in_flight", c.gateway.max_in_flight);
    maybe(g, "max_attempts", c.gateway.max_attempts);
    maybe(g, "backoff_initial_ms", c.gateway.backoff_initial_ms);
    maybe(g, "backoff_jitter", c.gateway.backoff_jitter);
    maybe(g, "mock_seed", c.gateway.mock_seed);
    maybe(g, "mock_d_lm", c.gateway.mock_d_lm);
    maybe(g, "mock_tag_noise", c.gateway.mock_tag_noise);
  }
  if (j.contains("extraction")) {
    const Json& e = j.at("extraction");
    maybe(e, "batch_size", c.extraction.batch_size);
    maybe(e, "overlap", c.extraction.overlap);
    maybe(e, "prompt_file", c.extraction.prompt_file);
    maybe(e, "keywords_min", c.extraction.keywords_min);
    maybe(e, "keywords_max", c.extraction.keywords_max);
  }
  if (j.contains("reducer")) {
    maybe(j.at("reducer"), "d_crm", c.reducer.d_crm);
  }
  if (j.contains("retriever")) {
    const Json& r = j.at("retriever");
    maybe(r, "d_crm", c.retriever.d_crm);
    maybe(r, "blocks", c.retriever.blocks);
    maybe(r, "heads", c.retriever.heads);
    maybe(r, "max_len", c.retriever.max_len);
    maybe(r, "lr", c.retriever.lr);
    maybe(r, "epochs", c.retriever.epochs);
    maybe(r, "negatives", c.retriever.negatives);
    maybe(r, "batch_size", c.retriever.batch_size);
    maybe(r, "seed", c.retriever.seed);
    maybe(r, "use_user_slot", c.retriever.use_user_slot);
    maybe(r, "dropout", c.retriever.dropout);
  }
  if (j.contains("ranker")) {
    const Json& r = j.at("ranker");
    maybe(r, "variant", c.ranker.variant);
    maybe(r, "slate_size", c.ranker.slate_size);
    maybe(r, "history_len", c.ranker.history_len);
  }
  if (j.contains("eval")) {
    const Json& e = j.at("eval");
    maybe(e, "k", c.eval.k);
    maybe(e, "runs", c.eval.runs);
    maybe(e, "mapb_subsample", c.eval.mapb_subsample);
    maybe(e, "seed", c.eval.seed);
  }
  maybe(j, "output_dir", c.output_dir);
  return c;
}

Json PipelineConfig::to_json() const {
  Json j;
  j["data"] = {{"interactions", data.interactions},
               {"items", data.items},
               {"k_core", data.k_core},
               {"tag", data.tag}};
  j["gateway"] = {{"mock", gateway.mock},
                  {"endpoint", gateway.endpoint},
                  {"model", gateway.model},
                  {"embed_model", gateway.embed_model},
                  {"api_key_env", gateway.api_key_env},
                  {"cache_dir", gateway.cache_dir},
                  {"max_in_flight", gateway.max_in_flight},
                  {"max_attempts", gateway.max_attempts},
                  {"backoff_initial_ms", gateway.backoff_initial_ms},
                  {"backoff_jitter", gateway.backoff_jitter},
                  {"mock_seed", gateway.mock_seed},
                  {"mock_d_lm", gateway.mock_d_lm},
                  {"mock_tag_noise", gateway.mock_tag_noise}};
  j["extraction"] = {{"batch_size", extraction.batch_size},
                     {"overlap", extraction.overlap},
                     {"prompt_file", extraction.prompt_file},
                     {"keywords_min", extraction.keywords_min},
                     {"keywords_max", extraction.keywords_max}};
  j["reducer"] = {{"d_crm", reducer.d_crm}};
  j["retriever"] = {{"d_crm", retriever.d_crm},
                    {"blocks", retriever.blocks},
                    {"heads", retriever.heads},
                    {"max_len", retriever.max_len},
                    {"lr", retriever.lr},
                    {"epochs", retriever.epochs},
                    {"negatives", retriever.negatives},
                    {"batch_size", retriever.batch_size},
                    {"seed", retriever.seed},
                    {"use_user_slot", retriever.use_user_slot},
                    {"dropout", retriever.dropout}};
  j["ranker"] = {{"variant", ranker.variant},
                 {"slate_size", ranker.slate_size},
                 {"history_len", ranker.history_len}};
  j["eval"] = {{"k", eval.k},
               {"runs", eval.runs},
               {"mapb_subsample", eval.mapb_subsample},
               {"seed", eval.seed}};
  j["output_dir"] = output_dir;
  return j;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  Json j = Json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) {
    throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  return from_json(j);
}

void PipelineConfig::apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  std::replace(key.begin(), key.end(), '.', '/');
  Json parsed = Json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  j[Json::json_pointer("/" + key)] = parsed;
}

void PipelineConfig::validate() const {
  retriever.validate();
  if (data.k_core < 1) throw ConfigError("data.k_core must be >= 1");
  if (extraction.batch_size < 1) throw ConfigError("extraction.batch_size must be >= 1");
  if (extraction.overlap < 0 || extraction.overlap >= extraction.batch_size) {
    throw ConfigError("extraction.overlap must be in [0, batch_size)");
  }
  if (extraction.keywords_min < 1 || extraction.keywords_max < extraction.keywords_min) {
    throw ConfigError("extraction keyword bounds must satisfy 1 <= min <= max");
  }
  if (reducer.d_crm < 0) throw ConfigError("reducer.d_crm must be >= 0");
  ranker_variant_from_string(ranker.variant);
  if (ranker.slate_size < 1 || ranker.slate_size > 26) {
    throw ConfigError("ranker.slate_size must be in [1, 26]");
  }
  if (ranker.history_len < 0) throw ConfigError("ranker.history_len must be >= 0");
  if (eval.k < 1 || eval.runs < 1 || eval.mapb_subsample < 0) {
    throw ConfigError("eval: k >= 1, runs >= 1, mapb_subsample >= 0 required");
  }
  if (gateway.max_in_flight < 1) throw ConfigError("gateway.max_in_flight must be >= 1");
  if (gateway.max_attempts < 1) throw ConfigError("gateway.max_attempts must be >= 1");
  if (gateway.mock_d_lm < 1) throw ConfigError("gateway.mock_d_lm must be >= 1");
  if (!gateway.mock && gateway.endpoint.empty()) {
    throw ConfigError("gateway.endpoint is required when gateway.mock is false");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

std::string PipelineConfig::config_hash() const { return sha256_hex8(to_json().dump()); }

std::vector<std::pair<std::string, std::string>> ablation_grid() {
  return {
      {"none", "random"},        {"none", "caption"},       {"none", "description"},
      {"random", "caption"},     {"random", "description"}, {"preference", "caption"},
      {"preference", "description"},
  };
}

}  // namespace cotrec
