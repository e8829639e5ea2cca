#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace aggquery {

/// Reads one JSON value per non-blank line; parse errors name file and line.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& body);

} // namespace aggquery
