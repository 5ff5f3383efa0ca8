// cotrec: staged CLI for the two-stage LLM-assisted recommender pipeline.
//
// Commands: ingest, extract, fit-reducer, train, retrieve, eval, report.
// Exit codes: 0 ok, 2 usage error / missing artifact, 3 backend failure.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cotrec/config.hpp"
#include "cotrec/corpus.hpp"
#include "cotrec/encode_map.hpp"
#include "cotrec/error.hpp"
#include "cotrec/evalkit.hpp"
#include "cotrec/extraction.hpp"
#include "cotrec/gateway.hpp"
#include "cotrec/hash.hpp"
#include "cotrec/io.hpp"
#include "cotrec/prompts.hpp"
#include "cotrec/ranker.hpp"
#include "cotrec/retriever.hpp"

namespace fs = std::filesystem;
using namespace cotrec;

namespace {

std::string iso_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

Json hash_files(const std::vector<fs::path>& paths) {
  Json out = Json::object();
  for (const auto& p : paths) out[p.string()] = sha256_hex(read_file(p));
  return out;
}

void write_manifest(const fs::path& stage_dir, const std::string& command,
                    const PipelineConfig& cfg, const Json& args,
                    const std::vector<fs::path>& inputs,
                    const std::vector<fs::path>& outputs,
                    const GatewayStats* stats) {
  Json m;
  m["command"] = command;
  m["args"] = args;
  m["config_hash"] = cfg.config_hash();
  m["config"] = cfg.to_json();
  m["timestamp"] = iso_now();
  m["inputs"] = hash_files(inputs);
  m["outputs"] = hash_files(outputs);
  if (stats) {
    m["gateway"] = {{"chat_calls", stats->chat_calls},
                    {"embed_calls", stats->embed_calls},
                    {"backend_calls", stats->backend_calls},
                    {"cache_hits", stats->cache_hits}};
  } else {
    m["gateway"] = nullptr;
  }
  atomic_write_file(stage_dir / "manifest.json", m.dump(2) + "\n");
}

std::unique_ptr<Gateway> make_gateway(const PipelineConfig& cfg) {
  std::shared_ptr<TextBackend> backend;
  if (cfg.gateway.mock) {
    MockConfig mc;
    mc.seed = cfg.gateway.mock_seed;
    mc.d_lm = cfg.gateway.mock_d_lm;
    mc.tag_noise = cfg.gateway.mock_tag_noise;
    backend = std::make_shared<MockBackend>(mc);
  } else {
    HttpBackendConfig hc;
    hc.base_url = cfg.gateway.endpoint;
    hc.model = cfg.gateway.model;
    hc.embed_model = cfg.gateway.embed_model;
    if (const char* key = std::getenv(cfg.gateway.api_key_env.c_str())) {
      hc.api_key = key;
    }
    backend = std::make_shared<HttpBackend>(hc);
  }
  auto cache = std::make_shared<DiskCache>(cfg.cache_dir());
  GatewayConfig gc;
  gc.max_attempts = cfg.gateway.max_attempts;
  gc.backoff_initial_ms = cfg.gateway.backoff_initial_ms;
  gc.backoff_jitter = cfg.gateway.backoff_jitter;
  gc.max_in_flight = cfg.gateway.max_in_flight;
  return std::make_unique<Gateway>(std::move(backend), std::move(cache), gc);
}

PromptLibrary load_prompts(const PipelineConfig& cfg) {
  if (cfg.extraction.prompt_file.empty()) return PromptLibrary::defaults();
  return PromptLibrary::load(cfg.extraction.prompt_file);
}

fs::path dataset_artifact(const PipelineConfig& cfg) {
  return cfg.run_dir() / "dataset" / "dataset.json";
}

Dataset load_dataset_artifact(const PipelineConfig& cfg) {
  const fs::path p = dataset_artifact(cfg);
  if (!fs::exists(p)) {
    throw ArtifactError("missing dataset artifact " + p.string() +
                        "; run `cotrec ingest` first");
  }
  return load_dataset(p);
}

fs::path checkpoint_path(const PipelineConfig& cfg, const std::string& cell) {
  return cfg.run_dir() / "train" / cell / "checkpoint.bin";
}

RetrieverParams load_checkpoint_artifact(const PipelineConfig& cfg,
                                         const std::string& cell) {
  const fs::path p = checkpoint_path(cfg, cell);
  if (!fs::exists(p)) {
    throw ArtifactError("missing checkpoint " + p.string() +
                        "; run `cotrec train` for cell " + cell + " first");
  }
  return load_checkpoint(p);
}

std::vector<UserPreference> load_preferences_artifact(const PipelineConfig& cfg) {
  const fs::path p = cfg.run_dir() / "preferences" / "preferences.jsonl";
  if (!fs::exists(p)) {
    throw ArtifactError("missing preferences artifact " + p.string() +
                        "; run `cotrec extract --stage preferences` first");
  }
  return load_preferences(p);
}

std::map<int, std::vector<int>> eval_input_seqs(const Dataset& d, const SplitSpec& s) {
  std::map<int, std::vector<int>> seqs;
  for (int u = 1; u <= d.num_users(); ++u) {
    const UserSplit& sp = s.users.at(static_cast<std::size_t>(u));
    if (sp.test <= 0) continue;
    std::vector<int> input = sp.train;
    if (sp.val > 0) input.push_back(sp.val);
    seqs[u] = std::move(input);
  }
  return seqs;
}

ExtractionConfig extraction_config(const PipelineConfig& cfg) {
  ExtractionConfig ec;
  ec.batch_size = static_cast<std::size_t>(cfg.extraction.batch_size);
  ec.overlap = static_cast<std::size_t>(cfg.extraction.overlap);
  ec.keywords_min = static_cast<std::size_t>(cfg.extraction.keywords_min);
  ec.keywords_max = static_cast<std::size_t>(cfg.extraction.keywords_max);
  return ec;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_ingest(const PipelineConfig& cfg) {
  if (!fs::exists(cfg.data.interactions)) {
    throw ConfigError("interactions file not found: " + cfg.data.interactions);
  }
  if (!fs::exists(cfg.data.items)) {
    throw ConfigError("item catalog file not found: " + cfg.data.items);
  }
  Dataset raw = ingest(cfg.data.interactions, cfg.data.items);
  Dataset filtered = filter_k_core(raw, cfg.data.k_core);
  SplitSpec splits = split_leave_one_out(filtered);  // validates sequence lengths
  (void)splits;

  const fs::path dir = cfg.run_dir() / "dataset";
  fs::create_directories(dir);
  save_dataset(filtered, dir / "dataset.json");
  write_manifest(dir, "ingest", cfg, Json::object(),
                 {cfg.data.interactions, cfg.data.items}, {dir / "dataset.json"},
                 nullptr);
  std::cout << "[ingest] users=" << filtered.num_users()
            << " items=" << filtered.num_items()
            << " interactions=" << filtered.num_interactions() << " -> "
            << (dir / "dataset.json").string() << "\n";
  return 0;
}

std::vector<std::pair<int, int>> load_pair_file(const fs::path& path) {
  std::vector<std::pair<int, int>> pairs;
  for_each_jsonl(path, [&](std::size_t, const Json& j) {
    const int user = j.at("user").get<int>();
    if (j.contains("items")) {
      for (int item : j.at("items").get<std::vector<int>>()) pairs.emplace_back(user, item);
    } else {
      pairs.emplace_back(user, j.at("item").get<int>());
    }
  });
  return pairs;
}

int cmd_extract(const PipelineConfig& cfg, const std::string& stage,
                const std::string& pairs_path) {
  Dataset d = load_dataset_artifact(cfg);
  SplitSpec splits = split_leave_one_out(d);
  auto gateway = make_gateway(cfg);
  Extractor extractor(*gateway, load_prompts(cfg), extraction_config(cfg));

  const fs::path dir = cfg.run_dir() / stage;
  fs::create_directories(dir);
  const fs::path transcript_path = dir / "transcripts.jsonl";
  std::vector<TranscriptRecord> all_transcripts;
  if (fs::exists(transcript_path)) all_transcripts = load_transcripts(transcript_path);

  std::vector<fs::path> inputs{dataset_artifact(cfg)};
  fs::path artifact;
  if (stage == "preferences") {
    artifact = dir / "preferences.jsonl";
    std::vector<UserPreference> existing;
    if (fs::exists(artifact)) existing = load_preferences(artifact);
    std::vector<UserPreference> prefs =
        extract_all_preferences(extractor, d, splits, existing);
    save_preferences(artifact, prefs);
    std::cout << "[extract preferences] users=" << prefs.size()
              << " (resumed past " << existing.size() << ")\n";
  } else {
    fs::path pair_file = pairs_path.empty()
                             ? cfg.run_dir() / "retrieve" / "candidates.jsonl"
                             : fs::path(pairs_path);
    if (!fs::exists(pair_file)) {
      throw ArtifactError("perceptions need a candidate list: " + pair_file.string() +
                          " not found; run `cotrec retrieve --for-eval` or pass --pairs");
    }
    std::vector<UserPreference> prefs = load_preferences_artifact(cfg);
    std::vector<std::pair<int, int>> pairs = load_pair_file(pair_file);
    artifact = dir / "perceptions.jsonl";
    std::vector<ItemPerception> existing;
    if (fs::exists(artifact)) existing = load_perceptions(artifact);
    std::vector<ItemPerception> percs =
        extract_all_perceptions(extractor, d, prefs, pairs, existing);
    save_perceptions(artifact, percs);
    inputs.push_back(pair_file);
    std::cout << "[extract perceptions] pairs=" << percs.size() << " (resumed past "
              << existing.size() << ")\n";
  }

  all_transcripts.insert(all_transcripts.end(), extractor.transcripts().begin(),
                         extractor.transcripts().end());
  save_transcripts(transcript_path, all_transcripts);

  LeakageReport leak = scan_transcripts_for_leakage(all_transcripts, d, splits);
  if (leak.violations > 0) {
    for (const auto& detail : leak.details) std::cerr << "leakage: " << detail << "\n";
    throw Error("extraction leakage scan failed: " + std::to_string(leak.violations) +
                " prompt(s) reference held-out items");
  }

  GatewayStats stats = gateway->stats();
  write_manifest(dir, "extract", cfg, Json{{"stage", stage}}, inputs,
                 {artifact, transcript_path}, &stats);
  std::cout << "[extract " << stage << "] backend_calls=" << stats.backend_calls
            << " cache_hits=" << stats.cache_hits << "\n";
  return 0;
}

int cmd_fit_reducer(const PipelineConfig& cfg) {
  Dataset d = load_dataset_artifact(cfg);
  std::vector<UserPreference> prefs = load_preferences_artifact(cfg);
  auto gateway = make_gateway(cfg);

  std::vector<std::string> texts;
  texts.reserve(static_cast<std::size_t>(d.num_items()) + prefs.size());
  for (int item = 1; item <= d.num_items(); ++item) {
    texts.push_back(item_text(d.meta(item), ItemInitMode::kDescription));
  }
  for (const auto& p : prefs) texts.push_back(p.text);

  Eigen::MatrixXd corpus;
  std::size_t row = 0;
  for (std::size_t start = 0; start < texts.size(); start += 128) {
    const std::size_t end = std::min(texts.size(), start + 128);
    std::vector<std::string> batch(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                   texts.begin() + static_cast<std::ptrdiff_t>(end));
    EmbedResponse resp = gateway->embed(batch);
    if (resp.vectors.size() != batch.size()) {
      throw TransportError("embedding backend returned wrong vector count");
    }
    for (const auto& v : resp.vectors) {
      if (corpus.size() == 0) {
        corpus.resize(static_cast<Eigen::Index>(texts.size()),
                      static_cast<Eigen::Index>(v.size()));
      }
      for (std::size_t jx = 0; jx < v.size(); ++jx) {
        corpus(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(jx)) = v[jx];
      }
      ++row;
    }
  }

  Reducer reducer = fit_reducer(corpus, cfg.reducer_dim());
  const fs::path dir = cfg.run_dir() / "reducer";
  fs::create_directories(dir);
  save_reducer(reducer, dir / "reducer.json");
  GatewayStats stats = gateway->stats();
  write_manifest(dir, "fit-reducer", cfg, Json::object(),
                 {dataset_artifact(cfg), cfg.run_dir() / "preferences" / "preferences.jsonl"},
                 {dir / "reducer.json"}, &stats);
  std::cout << "[fit-reducer] rows=" << corpus.rows() << " d_lm=" << corpus.cols()
            << " d_crm=" << cfg.reducer_dim() << "\n";
  return 0;
}

int train_one_cell(const PipelineConfig& cfg, const Dataset& d, const SplitSpec& splits,
                   const std::string& user_mode, const std::string& item_mode) {
  const UserInitMode umode = user_init_mode_from_string(user_mode);
  const ItemInitMode imode = item_init_mode_from_string(item_mode);
  ModelConfig mc = cfg.retriever;
  mc.use_user_slot = umode != UserInitMode::kNone;

  const bool needs_text = imode != ItemInitMode::kRandom || umode == UserInitMode::kPreference;
  Reducer reducer;
  const Reducer* reducer_ptr = nullptr;
  std::unique_ptr<Gateway> gateway;
  if (needs_text) {
    const fs::path rp = cfg.run_dir() / "reducer" / "reducer.json";
    if (!fs::exists(rp)) {
      throw ArtifactError("missing reducer artifact " + rp.string() +
                          "; run `cotrec fit-reducer` first");
    }
    reducer = load_reducer(rp);
    reducer_ptr = &reducer;
    gateway = make_gateway(cfg);
  }
  std::vector<UserPreference> prefs;
  if (umode == UserInitMode::kPreference) prefs = load_preferences_artifact(cfg);

  EmbeddingTable item_table =
      build_item_table(imode, d, mc.d_crm, reducer_ptr, gateway.get(), mc.seed);
  std::optional<EmbeddingTable> user_table = build_user_table(
      umode, prefs, d.num_users(), mc.d_crm, reducer_ptr, gateway.get(), mc.seed);

  std::vector<TrainLogRow> log;
  RetrieverParams params = train_retriever(d, splits, mc, &item_table,
                                           user_table ? &*user_table : nullptr, &log);
  params.user_mode = user_mode;
  params.item_mode = item_mode;

  const std::string cell = user_mode + "-" + item_mode;
  const fs::path dir = cfg.run_dir() / "train" / cell;
  fs::create_directories(dir);
  save_checkpoint(params, dir / "checkpoint.bin");
  save_train_log(log, dir / "train_log.csv");

  std::vector<fs::path> inputs{dataset_artifact(cfg)};
  if (needs_text) inputs.push_back(cfg.run_dir() / "reducer" / "reducer.json");
  if (umode == UserInitMode::kPreference) {
    inputs.push_back(cfg.run_dir() / "preferences" / "preferences.jsonl");
  }
  GatewayStats stats;
  if (gateway) stats = gateway->stats();
  write_manifest(dir, "train", cfg,
                 Json{{"user_mode", user_mode}, {"item_mode", item_mode}}, inputs,
                 {dir / "checkpoint.bin", dir / "train_log.csv"},
                 gateway ? &stats : nullptr);
  const TrainLogRow& last = log.empty() ? TrainLogRow{} : log.back();
  std::cout << "[train " << cell << "] epochs=" << mc.epochs
            << " final_loss=" << last.loss << " val_hit10=" << last.val_hit10
            << " val_ndcg10=" << last.val_ndcg10 << "\n";
  return 0;
}

int cmd_train(const PipelineConfig& cfg, const std::string& user_mode,
              const std::string& item_mode, bool grid) {
  Dataset d = load_dataset_artifact(cfg);
  SplitSpec splits = split_leave_one_out(d);
  if (grid) {
    for (const auto& [um, im] : ablation_grid()) train_one_cell(cfg, d, splits, um, im);
    return 0;
  }
  if (user_mode.empty() || item_mode.empty()) {
    throw ConfigError("train needs --grid or both --user-mode and --item-mode");
  }
  return train_one_cell(cfg, d, splits, user_mode, item_mode);
}

int cmd_retrieve(const PipelineConfig& cfg, const std::string& cell, int k,
                 bool for_eval) {
  Dataset d = load_dataset_artifact(cfg);
  SplitSpec splits = split_leave_one_out(d);
  RetrieverParams params = load_checkpoint_artifact(cfg, cell);
  const int top_k = k > 0 ? k : cfg.ranker.slate_size;

  const fs::path dir = cfg.run_dir() / "retrieve";
  fs::create_directories(dir);
  std::vector<Json> rows;
  for (const auto& [u, input] : eval_input_seqs(d, splits)) {
    TopK topk = retrieve_topk(params, u, input, top_k);
    std::vector<int> items = topk.items;
    if (for_eval) {
      const int target = splits.users.at(static_cast<std::size_t>(u)).test;
      if (std::find(items.begin(), items.end(), target) == items.end()) {
        items.push_back(target);
      }
    }
    rows.push_back(Json{{"user", u}, {"items", items}, {"truncated", topk.truncated}});
  }
  const fs::path out = dir / "candidates.jsonl";
  write_jsonl(out, rows);
  write_manifest(dir, "retrieve", cfg,
                 Json{{"cell", cell}, {"k", top_k}, {"for_eval", for_eval}},
                 {dataset_artifact(cfg), checkpoint_path(cfg, cell)}, {out}, nullptr);
  std::cout << "[retrieve] users=" << rows.size() << " k=" << top_k
            << (for_eval ? " (+eval targets)" : "") << "\n";
  return 0;
}

int cmd_eval(const PipelineConfig& cfg, const std::string& target,
             const std::string& cell, const std::string& variant_flag) {
  Dataset d = load_dataset_artifact(cfg);
  SplitSpec splits = split_leave_one_out(d);
  RetrieverParams params = load_checkpoint_artifact(cfg, cell);

  if (target == "retriever") {
    MetricReport rep =
        eval_retriever(params, d, splits, cfg.eval.k, cfg.data.tag, cell);
    const fs::path dir = cfg.run_dir() / "eval" / ("retriever-" + cell);
    fs::create_directories(dir);
    save_report_csv(rep, dir / "report.csv");
    save_report_json(rep, dir / "report.json");
    write_manifest(dir, "eval", cfg, Json{{"target", target}, {"cell", cell}},
                   {dataset_artifact(cfg), checkpoint_path(cfg, cell)},
                   {dir / "report.csv", dir / "report.json"}, nullptr);
    std::cout << rep.to_table();
    return 0;
  }

  const std::string variant_name =
      variant_flag.empty() ? cfg.ranker.variant : variant_flag;
  const RankerVariant variant = ranker_variant_from_string(variant_name);
  auto gateway = make_gateway(cfg);
  PromptLibrary lib = load_prompts(cfg);

  ExtractionArtifacts artifacts;
  const ExtractionArtifacts* artifacts_ptr = nullptr;
  std::vector<fs::path> inputs{dataset_artifact(cfg), checkpoint_path(cfg, cell)};
  if (variant == RankerVariant::kEnriched) {
    std::vector<UserPreference> prefs = load_preferences_artifact(cfg);
    const fs::path pp = cfg.run_dir() / "perceptions" / "perceptions.jsonl";
    if (!fs::exists(pp)) {
      throw ArtifactError("missing perceptions artifact " + pp.string() +
                          "; run `cotrec extract --stage perceptions` first");
    }
    artifacts = ExtractionArtifacts::index(prefs, load_perceptions(pp));
    artifacts_ptr = &artifacts;
    inputs.push_back(cfg.run_dir() / "preferences" / "preferences.jsonl");
    inputs.push_back(pp);
  }

  RankerConfig rc;
  rc.variant = variant;
  rc.slate_size = cfg.ranker.slate_size;
  rc.history_len = cfg.ranker.history_len;
  LlmSlateRanker ranker(*gateway, lib, d, rc, artifacts_ptr, eval_input_seqs(d, splits));

  RankerEvalConfig ec;
  ec.k = cfg.eval.k;
  ec.slate_size = cfg.ranker.slate_size;
  ec.runs = cfg.eval.runs;
  ec.seed = cfg.eval.seed;
  ec.mapb_subsample = cfg.eval.mapb_subsample;
  ec.dataset_tag = cfg.data.tag;
  ec.retriever_tag = cell;
  ec.ranker_tag = variant_name;
  MetricReport rep = eval_ranker(ranker, params, d, splits, ec);

  const fs::path dir = cfg.run_dir() / "eval" / ("ranker-" + variant_name + "-" + cell);
  fs::create_directories(dir);
  save_report_csv(rep, dir / "report.csv");
  save_report_json(rep, dir / "report.json");
  save_rank_transcripts(dir / "rank_transcripts.jsonl", ranker.transcripts());
  GatewayStats stats = gateway->stats();
  write_manifest(dir, "eval", cfg,
                 Json{{"target", target}, {"cell", cell}, {"variant", variant_name}},
                 inputs,
                 {dir / "report.csv", dir / "report.json", dir / "rank_transcripts.jsonl"},
                 &stats);
  std::cout << rep.to_table();
  std::cout << "[eval ranker] backend_calls=" << stats.backend_calls
            << " cache_hits=" << stats.cache_hits << "\n";
  return 0;
}

int cmd_report(const PipelineConfig& cfg) {
  const fs::path eval_dir = cfg.run_dir() / "eval";
  if (!fs::exists(eval_dir)) {
    throw ArtifactError("no evaluation outputs under " + eval_dir.string() +
                        "; run `cotrec eval` first");
  }
  std::vector<fs::path> report_files;
  for (const auto& entry : fs::directory_iterator(eval_dir)) {
    const fs::path rj = entry.path() / "report.json";
    if (fs::exists(rj)) report_files.push_back(rj);
  }
  std::sort(report_files.begin(), report_files.end());
  if (report_files.empty()) {
    throw ArtifactError("no report.json files under " + eval_dir.string());
  }

  std::ostringstream table, csv;
  csv << "scope,retriever,ranker,metric,mean\n";
  for (const auto& rj : report_files) {
    Json j = Json::parse(read_file(rj));
    table << "== " << rj.parent_path().filename().string() << " ==\n";
    char buf[160];
    for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it) {
      const double mean = it.value().at("mean").get<double>();
      std::snprintf(buf, sizeof(buf), "  %-18s %10.4f\n", it.key().c_str(), mean);
      table << buf;
      csv << (j.at("ranker").get<std::string>() == "none" ? "retriever" : "ranker") << ","
          << j.at("retriever").get<std::string>() << "," << j.at("ranker").get<std::string>()
          << "," << it.key() << "," << mean << "\n";
    }
  }
  const fs::path dir = cfg.run_dir() / "report";
  fs::create_directories(dir);
  atomic_write_file(dir / "summary.txt", table.str());
  atomic_write_file(dir / "summary.csv", csv.str());
  write_manifest(dir, "report", cfg, Json::object(), report_files,
                 {dir / "summary.txt", dir / "summary.csv"}, nullptr);
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cotrec: two-stage LLM-assisted recommender pipeline"};
  app.fallthrough();
  app.require_subcommand(1);

  std::string config_path = "config.json";
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "pipeline config JSON file");
  app.add_option("--set", overrides, "override config values (section.key=value)");

  CLI::App* sc_ingest = app.add_subcommand("ingest", "load, filter, and split the dataset");
  std::string stage, pairs_path;
  CLI::App* sc_extract = app.add_subcommand("extract", "run offline LLM extraction");
  sc_extract->add_option("--stage", stage, "preferences | perceptions")
      ->required()
      ->check(CLI::IsMember({"preferences", "perceptions"}));
  sc_extract->add_option("--pairs", pairs_path, "explicit (user, item) pair file (JSONL)");
  CLI::App* sc_reducer =
      app.add_subcommand("fit-reducer", "fit the embedding-space reducer");
  std::string user_mode, item_mode, cell, target, variant_flag;
  bool grid = false, for_eval = false;
  int retrieve_k = 0;
  CLI::App* sc_train = app.add_subcommand("train", "train the retriever");
  sc_train->add_option("--user-mode", user_mode, "none | random | preference");
  sc_train->add_option("--item-mode", item_mode, "random | caption | description");
  sc_train->add_flag("--grid", grid, "train all seven ablation cells");
  CLI::App* sc_retrieve =
      app.add_subcommand("retrieve", "write top-K candidates per test user");
  sc_retrieve->add_option("--cell", cell, "trained cell, e.g. none-random")->required();
  sc_retrieve->add_option("--k", retrieve_k, "candidates per user (default: ranker.slate_size)");
  sc_retrieve->add_flag("--for-eval", for_eval,
                        "also include each user's held-out target item");
  CLI::App* sc_eval = app.add_subcommand("eval", "evaluate retriever or ranker");
  sc_eval->add_option("--target", target, "retriever | ranker")
      ->required()
      ->check(CLI::IsMember({"retriever", "ranker"}));
  sc_eval->add_option("--cell", cell, "trained cell, e.g. none-random")->required();
  sc_eval->add_option("--variant", variant_flag, "ranker variant: plain | enriched");
  CLI::App* sc_report = app.add_subcommand("report", "aggregate evaluation outputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (!fs::exists(config_path)) {
      throw ConfigError("config file not found: " + config_path);
    }
    Json cj = Json::parse(read_file(config_path), nullptr, false);
    if (cj.is_discarded()) {
      throw ConfigError("config file " + config_path + " is not valid JSON");
    }
    for (const auto& ov : overrides) PipelineConfig::apply_override(cj, ov);
    PipelineConfig cfg = PipelineConfig::from_json(cj);
    cfg.validate();

    if (sc_ingest->parsed()) return cmd_ingest(cfg);
    if (sc_extract->parsed()) return cmd_extract(cfg, stage, pairs_path);
    if (sc_reducer->parsed()) return cmd_fit_reducer(cfg);
    if (sc_train->parsed()) return cmd_train(cfg, user_mode, item_mode, grid);
    if (sc_retrieve->parsed()) return cmd_retrieve(cfg, cell, retrieve_k, for_eval);
    if (sc_eval->parsed()) return cmd_eval(cfg, target, cell, variant_flag);
    if (sc_report->parsed()) return cmd_report(cfg);
    throw ConfigError("no command given");
  } catch (const TransportError& e) {
    std::cerr << "backend failure: " << e.what() << "\n"
              << "hint: completed calls are cached; re-run the command to resume\n";
    return 3;
  } catch (const CapabilityError& e) {
    std::cerr << "backend capability failure: " << e.what() << "\n";
    return 3;
  } catch (const ExtractionError& e) {
    std::cerr << "extraction failure: " << e.what() << "\n"
              << "hint: completed users are cached; re-run the command to resume\n";
    return 3;
  } catch (const RankingError& e) {
    std::cerr << "ranking failure: " << e.what() << "\n";
    return 3;
  } catch (const cotrec::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}
