#pragma once

#include <filesystem>
#include <string>

namespace cdd {

// Whole-file helpers; failures raise IoError naming the path.
std::string read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename.
void write_file(const std::filesystem::path& path, const std::string& bytes);
void ensure_directory(const std::filesystem::path& dir);

}  // namespace cdd
