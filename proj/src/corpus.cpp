#include "cotrec/corpus.hpp"

#include <algorithm>
#include <set>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace fs = std::filesystem;

namespace cotrec {

int Dataset::user_index(const std::string& id) const {
  auto it = user_index_.find(id);
  return it == user_index_.end() ? 0 : it->second;
}

int Dataset::item_index(const std::string& id) const {
  auto it = item_index_.find(id);
  return it == item_index_.end() ? 0 : it->second;
}

std::size_t Dataset::num_interactions() const {
  std::size_t n = 0;
  for (const auto& seq : sequences_) n += seq.size();
  return n;
}

Dataset Dataset::build(const std::vector<Interaction>& interactions,
                       const std::vector<ItemMeta>& items) {
  Dataset d;
  for (const auto& m : items) {
    if (m.caption.empty()) throw ParseError("item " + m.item_id + ": empty caption");
    if (d.item_index_.count(m.item_id) != 0) {
      throw ParseError("duplicate item_id in metadata: " + m.item_id);
    }
    d.item_ids_.push_back(m.item_id);
    d.metas_.push_back(m);
    d.item_index_.emplace(m.item_id, d.num_items());
  }

  std::vector<std::set<std::pair<int, std::int64_t>>> seen{{}};
  for (const auto& ev : interactions) {
    if (ev.timestamp < 0) {
      throw ParseError("negative timestamp for user " + ev.user_id);
    }
    auto item_it = d.item_index_.find(ev.item_id);
    if (item_it == d.item_index_.end()) {
      throw ReferentialError("interaction references unknown item: " + ev.item_id);
    }
    int user = d.user_index(ev.user_id);
    if (user == 0) {
      d.user_ids_.push_back(ev.user_id);
      d.sequences_.emplace_back();
      seen.emplace_back();
      user = d.num_users();
      d.user_index_.emplace(ev.user_id, user);
    }
    // (user, item, timestamp) triples are unique after ingestion.
    if (!seen[static_cast<std::size_t>(user)].insert({item_it->second, ev.timestamp}).second) continue;
    d.sequences_[static_cast<std::size_t>(user)].push_back({item_it->second, ev.timestamp});
  }

  // Chronological order; equal timestamps keep input order.
  for (auto& seq : d.sequences_) {
    std::stable_sort(seq.begin(), seq.end(),
                     [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
  }
  return d;
}

Dataset ingest(const fs::path& interactions_path, const fs::path& items_path) {
  std::vector<ItemMeta> items;
  for_each_jsonl(items_path, [&](std::size_t line_no, const Json& r) {
    auto require_string = [&](const char* field) -> std::string {
      if (!r.contains(field) || !r[field].is_string()) {
        throw ParseError(items_path.string() + ":" + std::to_string(line_no) +
                         ": missing or non-string field '" + field + "'");
      }
      return r[field].get<std::string>();
    };
    ItemMeta m;
    m.item_id = require_string("item_id");
    m.caption = require_string("caption");
    if (m.caption.empty()) {
      throw ParseError(items_path.string() + ":" + std::to_string(line_no) + ": empty caption");
    }
    if (r.contains("description")) {
      if (!r["description"].is_string()) {
        throw ParseError(items_path.string() + ":" + std::to_string(line_no) +
                         ": non-string field 'description'");
      }
      m.description = r["description"].get<std::string>();
    }
    items.push_back(std::move(m));
  });

  std::vector<Interaction> interactions;
  for_each_jsonl(interactions_path, [&](std::size_t line_no, const Json& r) {
    auto fail = [&](const std::string& what) -> ParseError {
      return ParseError(interactions_path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    if (!r.contains("user_id") || !r["user_id"].is_string()) throw fail("missing or non-string field 'user_id'");
    if (!r.contains("item_id") || !r["item_id"].is_string()) throw fail("missing or non-string field 'item_id'");
    if (!r.contains("timestamp") || !r["timestamp"].is_number_integer()) {
      throw fail("missing or non-integer field 'timestamp'");
    }
    Interaction ev;
    ev.user_id = r["user_id"].get<std::string>();
    ev.item_id = r["item_id"].get<std::string>();
    ev.timestamp = r["timestamp"].get<std::int64_t>();
    if (ev.timestamp < 0) throw fail("negative timestamp");
    interactions.push_back(std::move(ev));
  });

  return Dataset::build(interactions, items);
}

Dataset filter_k_core(const Dataset& d, int k) {
  if (k < 1) throw ConfigError("filter_k_core: k must be >= 1");

  int nu = d.num_users();
  int ni = d.num_items();
  std::vector<bool> keep_user(static_cast<std::size_t>(nu) + 1, true);
  std::vector<bool> keep_item(static_cast<std::size_t>(ni) + 1, true);

  // Peel until both degree constraints hold simultaneously.
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<int> item_degree(static_cast<std::size_t>(ni) + 1, 0);
    for (int u = 1; u <= nu; ++u) {
      if (!keep_user[static_cast<std::size_t>(u)]) continue;
      int degree = 0;
      for (const Event& ev : d.sequence(u)) {
        if (keep_item[static_cast<std::size_t>(ev.item)]) ++degree;
      }
      if (degree < k) {
        keep_user[static_cast<std::size_t>(u)] = false;
        changed = true;
      } else {
        for (const Event& ev : d.sequence(u)) {
          if (keep_item[static_cast<std::size_t>(ev.item)]) ++item_degree[static_cast<std::size_t>(ev.item)];
        }
      }
    }
    for (int i = 1; i <= ni; ++i) {
      if (keep_item[static_cast<std::size_t>(i)] && item_degree[static_cast<std::size_t>(i)] < k) {
        keep_item[static_cast<std::size_t>(i)] = false;
        changed = true;
      }
    }
  }

  std::vector<ItemMeta> items;
  for (int i = 1; i <= ni; ++i) {
    if (keep_item[static_cast<std::size_t>(i)]) items.push_back(d.meta(i));
  }
  std::vector<Interaction> interactions;
  for (int u = 1; u <= nu; ++u) {
    if (!keep_user[static_cast<std::size_t>(u)]) continue;
    for (const Event& ev : d.sequence(u)) {
      if (!keep_item[static_cast<std::size_t>(ev.item)]) continue;
      interactions.push_back({d.user_id(u), d.item_id(ev.item), ev.timestamp});
    }
  }
  return Dataset::build(interactions, items);
}

SplitSpec split_leave_one_out(const Dataset& d) {
  SplitSpec spec;
  spec.users.resize(static_cast<std::size_t>(d.num_users()) + 1);
  for (int u = 1; u <= d.num_users(); ++u) {
    const auto& seq = d.sequence(u);
    if (seq.size() < 3) {
      throw SplitError("split_leave_one_out: user " + d.user_id(u) + " has sequence length " +
                       std::to_string(seq.size()) + " (< 3)");
    }
    UserSplit& s = spec.users[static_cast<std::size_t>(u)];
    for (std::size_t i = 0; i + 2 < seq.size(); ++i) s.train.push_back(seq[i].item);
    s.val = seq[seq.size() - 2].item;
    s.test = seq[seq.size() - 1].item;
  }
  return spec;
}

void save_dataset(const Dataset& d, const fs::path& path) {
  Json users = Json::array();
  for (int u = 1; u <= d.num_users(); ++u) {
    Json events = Json::array();
    for (const Event& ev : d.sequence(u)) {
      events.push_back(Json{{"item", d.item_id(ev.item)}, {"ts", ev.timestamp}});
    }
    users.push_back(Json{{"id", d.user_id(u)}, {"events", events}});
  }
  Json items = Json::array();
  for (int i = 1; i <= d.num_items(); ++i) {
    const ItemMeta& m = d.meta(i);
    items.push_back(Json{{"item_id", m.item_id}, {"caption", m.caption}, {"description", m.description}});
  }
  atomic_write_file(path, Json{{"users", users}, {"items", items}}.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& path) {
  Json doc = Json::parse(read_file(path), nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw ArtifactError("invalid dataset artifact: " + path.string());
  }
  std::vector<ItemMeta> items;
  for (const Json& it : doc.at("items")) {
    items.push_back({it.at("item_id").get<std::string>(), it.at("caption").get<std::string>(),
                     it.at("description").get<std::string>()});
  }
  std::vector<Interaction> interactions;
  for (const Json& u : doc.at("users")) {
    const std::string uid = u.at("id").get<std::string>();
    for (const Json& ev : u.at("events")) {
      interactions.push_back({uid, ev.at("item").get<std::string>(), ev.at("ts").get<std::int64_t>()});
    }
  }
  return Dataset::build(interactions, items);
}

}  // namespace cotrec
