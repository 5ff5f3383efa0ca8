#include "cotrec/prompts.hpp"

#include <cctype>

#include "cotrec/error.hpp"
#include "cotrec/io.hpp"

namespace cotrec {

PromptLibrary PromptLibrary::defaults() {
  PromptLibrary lib;
  auto& t = lib.templates_;

  t["summarize"] = {
      "You are an analyst of user behavior. From a chronological window of "
      "items a user interacted with, summarize the user's short-term "
      "interest in two or three sentences.",
      "Items in this window, oldest first:\n{items}\n\n"
      "Summarize the user's short-term interest."};

  t["summarize_with_prior"] = {
      "You are an analyst of user behavior. From a chronological window of "
      "items a user interacted with, summarize the user's short-term "
      "interest in two or three sentences. A running long-term preference "
      "is provided as context only.",
      "Long-term preference so far:\n{prior}\n\n"
      "Items in this window, oldest first:\n{items}\n\n"
      "Summarize the user's short-term interest."};

  t["merge"] = {
      "You maintain a running profile of a user's long-term preference. "
      "Integrate new evidence without discarding established interests.",
      "Current long-term preference:\n{long}\n\n"
      "New short-term interest:\n{short}\n\n"
      "State the updated long-term preference."};

  t["describe"] = {
      "You are a neutral catalog writer. Describe items factually, with no "
      "opinions and no reference to any user.",
      "Item:\n- {item}\n\nCatalog notes: {notes}\n\n"
      "Write an objective description of this item."};

  t["review"] = {
      "You are role-playing as a specific user. Stay in character and write "
      "from that user's perspective.",
      "Your long-term preference:\n{preference}\n\n"
      "Item under consideration:\n- {item}\n\n"
      "Objective description of the item:\n{description}\n\n"
      "Write a short first-person review of this item as this user would."};

  t["keywords"] = {
      "You extract key terms. Respond with one line of 3 to 10 short keyword "
      "phrases separated by semicolons. Output nothing else.",
      "Review:\n{review}\n\n"
      "Extract the key phrases that capture the subjective impression."};

  t["rank_plain"] = {
      "You are a recommender system. Given a user's recent items and a "
      "candidate list, identify the candidate the user is most likely to "
      "interact with next. Answer with the single index letter of that "
      "candidate and nothing else.",
      "Recently interacted items, oldest first:\n{history}\n\n"
      "Candidates:\n{candidates}\n\n"
      "Which candidate is the user most likely to interact with next? "
      "Answer with one index letter."};

  t["rank_enriched"] = {
      "You are a recommender system. Given a user's long-term preference, "
      "their recent items, and a candidate list annotated with the user's "
      "own impression keywords, identify the candidate the user is most "
      "likely to interact with next. Answer with the single index letter of "
      "that candidate and nothing else.",
      "User's long-term preference:\n{preference}\n\n"
      "Recently interacted items, oldest first:\n{history}\n\n"
      "Candidates, each with the user's impression keywords:\n{candidates}\n\n"
      "Which candidate is the user most likely to interact with next? "
      "Answer with one index letter."};

  return lib;
}

PromptLibrary PromptLibrary::load(const std::filesystem::path& file) {
  PromptLibrary lib = defaults();
  Json j = Json::parse(read_file(file), nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw ConfigError("prompts file " + file.string() + " is not a JSON object");
  }
  for (const auto& [name, entry] : j.items()) {
    if (!entry.is_object() || !entry.contains("system") || !entry.contains("user")) {
      throw ConfigError("prompts file " + file.string() + ": template '" + name +
                        "' must be an object with 'system' and 'user'");
    }
    lib.templates_[name] = {entry["system"].get<std::string>(),
                            entry["user"].get<std::string>()};
  }
  return lib;
}

void PromptLibrary::save(const std::filesystem::path& file) const {
  Json j = Json::object();
  for (const auto& [name, t] : templates_) {
    j[name] = {{"system", t.system}, {"user", t.user}};
  }
  atomic_write_file(file, j.dump(2) + "\n");
}

const PromptTemplate& PromptLibrary::get(const std::string& name) const {
  auto it = templates_.find(name);
  if (it == templates_.end()) {
    throw ConfigError("unknown prompt template '" + name + "'");
  }
  return it->second;
}

std::string PromptLibrary::substitute(const std::string& tmpl,
                                      const std::map<std::string, std::string>& subs) {
  std::string out;
  out.reserve(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      std::size_t close = tmpl.find('}', i + 1);
      if (close != std::string::npos) {
        std::string key = tmpl.substr(i + 1, close - i - 1);
        bool word_like = !key.empty();
        for (char c : key) {
          if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) {
            word_like = false;
            break;
          }
        }
        if (word_like) {
          auto it = subs.find(key);
          if (it == subs.end()) {
            throw ConfigError("prompt placeholder {" + key + "} has no binding");
          }
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i];
    ++i;
  }
  return out;
}

ChatRequest PromptLibrary::render(const std::string& name,
                                  const std::map<std::string, std::string>& subs,
                                  double temperature, int max_tokens) const {
  const PromptTemplate& t = get(name);
  ChatRequest req;
  req.system_prompt = substitute(t.system, subs);
  req.user_prompt = substitute(t.user, subs);
  req.temperature = temperature;
  req.max_tokens = max_tokens;
  return req;
}

}  // namespace cotrec
