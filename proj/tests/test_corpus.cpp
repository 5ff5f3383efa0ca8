#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cotrec/corpus.hpp"
#include "cotrec/error.hpp"
#include "cotrec/io.hpp"
#include "support/world.hpp"

using namespace cotrec;
namespace fs = std::filesystem;

namespace {

Dataset tiny(const std::vector<std::tuple<std::string, std::string, std::int64_t>>& recs,
             const std::vector<std::pair<std::string, std::string>>& items) {
  std::vector<Interaction> ints;
  for (const auto& [u, i, t] : recs) ints.push_back({u, i, t});
  std::vector<ItemMeta> metas;
  for (const auto& [id, cap] : items) metas.push_back({id, cap, ""});
  return Dataset::build(ints, metas);
}

}  // namespace

TEST_CASE("ingest sorts per-user sequences by timestamp") {
  Dataset d = tiny({{"u", "b", 30}, {"u", "a", 10}, {"u", "c", 20}},
                   {{"a", "A"}, {"b", "B"}, {"c", "C"}});
  const auto& seq = d.sequence(1);
  REQUIRE(seq.size() == 3);
  CHECK(d.item_id(seq[0].item) == "a");
  CHECK(d.item_id(seq[1].item) == "c");
  CHECK(d.item_id(seq[2].item) == "b");
}

TEST_CASE("equal timestamps preserve input order") {
  Dataset d = tiny({{"u", "x", 5}, {"u", "y", 5}, {"u", "z", 5}},
                   {{"x", "X"}, {"y", "Y"}, {"z", "Z"}});
  const auto& seq = d.sequence(1);
  CHECK(d.item_id(seq[0].item) == "x");
  CHECK(d.item_id(seq[1].item) == "y");
  CHECK(d.item_id(seq[2].item) == "z");
}

TEST_CASE("malformed interaction record raises a parse error naming the line") {
  const fs::path dir = testworld::fresh_temp_dir("corpus-parse");
  {
    std::ofstream f(dir / "interactions.jsonl");
    f << R"({"user_id":"u","item_id":"a","timestamp":1})" << "\n";
    f << R"({"user_id":"u","timestamp":2})" << "\n";  // missing item_id
  }
  {
    std::ofstream f(dir / "items.jsonl");
    f << R"({"item_id":"a","caption":"A"})" << "\n";
  }
  try {
    ingest(dir / "interactions.jsonl", dir / "items.jsonl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("interaction referencing an unknown item raises a referential error") {
  CHECK_THROWS_AS(tiny({{"u", "ghost", 1}}, {{"a", "A"}}), ReferentialError);
}

TEST_CASE("dense ids start at 1 and round-trip through the string index") {
  Dataset d = tiny({{"u1", "a", 1}, {"u2", "b", 2}}, {{"a", "A"}, {"b", "B"}});
  CHECK(d.user_index("u1") == 1);
  CHECK(d.user_index("u2") == 2);
  CHECK(d.user_index("nope") == 0);
  CHECK(d.item_index("a") >= 1);
  CHECK(d.item_index("zzz") == 0);
  CHECK(d.user_id(d.user_index("u2")) == "u2");
}

TEST_CASE("filter_k_core retains a dataset already satisfying the bound") {
  Dataset d = testworld::world_dataset();
  Dataset f = filter_k_core(d, 5);
  CHECK(f.num_users() == d.num_users());
  CHECK(f.num_items() == d.num_items());
  CHECK(f.num_interactions() == d.num_interactions());
}

TEST_CASE("filter_k_core empties a dataset below the threshold") {
  Dataset d = tiny({{"u", "a", 1}, {"u", "b", 2}, {"u", "c", 3}, {"u", "d", 4}},
                   {{"a", "A"}, {"b", "B"}, {"c", "C"}, {"d", "D"}});
  Dataset f = filter_k_core(d, 5);
  CHECK(f.num_users() == 0);
  CHECK(f.num_items() == 0);
}

TEST_CASE("filter_k_core peels hand-computed bipartite example") {
  // u1..u6 each interact with items a..e; u7 interacts only with a.
  std::vector<std::tuple<std::string, std::string, std::int64_t>> recs;
  for (int u = 1; u <= 6; ++u) {
    int t = 0;
    for (const char* item : {"a", "b", "c", "d", "e"}) {
      recs.emplace_back("u" + std::to_string(u), item, ++t);
    }
  }
  recs.emplace_back("u7", "a", 1);
  Dataset d = tiny(recs, {{"a", "A"}, {"b", "B"}, {"c", "C"}, {"d", "D"}, {"e", "E"}});
  Dataset f = filter_k_core(d, 5);
  CHECK(f.num_users() == 6);
  CHECK(f.num_items() == 5);
  CHECK(f.user_index("u7") == 0);
  for (int u = 1; u <= 6; ++u) {
    CHECK(f.user_index("u" + std::to_string(u)) != 0);
  }
}

TEST_CASE("filter_k_core is idempotent and leaves all degrees >= k") {
  Dataset d = testworld::world_dataset();
  Dataset once = filter_k_core(d, 5);
  Dataset twice = filter_k_core(once, 5);
  CHECK(once.num_users() == twice.num_users());
  CHECK(once.num_items() == twice.num_items());
  CHECK(once.num_interactions() == twice.num_interactions());

  std::vector<int> item_degree(static_cast<std::size_t>(once.num_items()) + 1, 0);
  for (int u = 1; u <= once.num_users(); ++u) {
    CHECK(once.sequence(u).size() >= 5);
    for (const auto& e : once.sequence(u)) ++item_degree[static_cast<std::size_t>(e.item)];
  }
  for (int i = 1; i <= once.num_items(); ++i) {
    CHECK(item_degree[static_cast<std::size_t>(i)] >= 5);
  }
}

TEST_CASE("split_leave_one_out follows the definition") {
  std::vector<std::tuple<std::string, std::string, std::int64_t>> recs;
  int t = 0;
  for (const char* item : {"a", "b", "c", "d", "e"}) recs.emplace_back("u", item, ++t);
  Dataset d = tiny(recs, {{"a", "A"}, {"b", "B"}, {"c", "C"}, {"d", "D"}, {"e", "E"}});
  SplitSpec s = split_leave_one_out(d);
  const UserSplit& us = s.users.at(1);
  REQUIRE(us.train.size() == 3);
  CHECK(d.item_id(us.train[0]) == "a");
  CHECK(d.item_id(us.train[1]) == "b");
  CHECK(d.item_id(us.train[2]) == "c");
  CHECK(d.item_id(us.val) == "d");
  CHECK(d.item_id(us.test) == "e");
}

TEST_CASE("split_leave_one_out minimum-length sequence") {
  Dataset d = tiny({{"u", "a", 1}, {"u", "b", 2}, {"u", "c", 3}},
                   {{"a", "A"}, {"b", "B"}, {"c", "C"}});
  SplitSpec s = split_leave_one_out(d);
  REQUIRE(s.users.at(1).train.size() == 1);
  CHECK(d.item_id(s.users.at(1).train[0]) == "a");
  CHECK(d.item_id(s.users.at(1).val) == "b");
  CHECK(d.item_id(s.users.at(1).test) == "c");
}

TEST_CASE("split_leave_one_out rejects sequences shorter than 3") {
  Dataset d = tiny({{"u", "a", 1}, {"u", "b", 2}}, {{"a", "A"}, {"b", "B"}});
  CHECK_THROWS_AS(split_leave_one_out(d), SplitError);
}

TEST_CASE("split concatenation reproduces the original sequence") {
  Dataset d = testworld::world_dataset();
  SplitSpec s = split_leave_one_out(d);
  for (int u = 1; u <= d.num_users(); ++u) {
    const UserSplit& us = s.users.at(static_cast<std::size_t>(u));
    std::vector<int> rebuilt = us.train;
    rebuilt.push_back(us.val);
    rebuilt.push_back(us.test);
    const auto& seq = d.sequence(u);
    REQUIRE(rebuilt.size() == seq.size());
    for (std::size_t j = 0; j < seq.size(); ++j) CHECK(rebuilt[j] == seq[j].item);
  }
}

TEST_CASE("dataset save/load round-trips") {
  Dataset d = testworld::world_dataset();
  const fs::path dir = testworld::fresh_temp_dir("corpus-save");
  save_dataset(d, dir / "dataset.json");
  Dataset loaded = load_dataset(dir / "dataset.json");
  CHECK(loaded.num_users() == d.num_users());
  CHECK(loaded.num_items() == d.num_items());
  CHECK(loaded.num_interactions() == d.num_interactions());
  for (int u = 1; u <= d.num_users(); ++u) {
    const auto& a = d.sequence(u);
    const auto& b = loaded.sequence(u);
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) {
      CHECK(a[j].item == b[j].item);
      CHECK(a[j].timestamp == b[j].timestamp);
    }
  }
  for (int i = 1; i <= d.num_items(); ++i) {
    CHECK(loaded.meta(i).caption == d.meta(i).caption);
    CHECK(loaded.meta(i).description == d.meta(i).description);
    CHECK(loaded.item_id(i) == d.item_id(i));
  }
  fs::remove_all(dir);
}
