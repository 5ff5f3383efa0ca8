#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <json.hpp>

namespace cotrec {

using Json = nlohmann::json;

// Reads an entire file. Throws ArtifactError if the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

// Writes `content` atomically: temp file in the same directory, then rename.
// Parent directories are created as needed.
void atomic_write_file(const std::filesystem::path& path, const std::string& content);

// Invokes `fn(line_number, record)` for each non-empty line of a JSON Lines
// file. Line numbers are 1-based. Throws ParseError naming the line on
// invalid JSON or when a line is not a JSON object.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(std::size_t, const Json&)>& fn);

// Serializes one record per line. Atomic like atomic_write_file.
void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& records);

}  // namespace cotrec
