#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "cotrec/gateway.hpp"

namespace cotrec {

struct PromptTemplate {
  std::string system;
  std::string user;
};

// Named chat templates with {placeholder} substitution. The built-in set
// covers the extraction personas (summarize / merge / describe / review /
// keywords) and the two ranking variants; a JSON file can override any of
// them so prompt text is versioned alongside other artifacts.
class PromptLibrary {
 public:
  static PromptLibrary defaults();
  static PromptLibrary load(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;

  bool has(const std::string& name) const { return templates_.count(name) > 0; }
  const PromptTemplate& get(const std::string& name) const;

  // Substitutes every {key} occurrence in one pass; a placeholder with no
  // binding is a configuration error (it means the template and the call
  // site disagree).
  ChatRequest render(const std::string& name,
                     const std::map<std::string, std::string>& subs,
                     double temperature = 0.0, int max_tokens = 512) const;

  static std::string substitute(const std::string& tmpl,
                                const std::map<std::string, std::string>& subs);

 private:
  std::map<std::string, PromptTemplate> templates_;
};

}  // namespace cotrec
