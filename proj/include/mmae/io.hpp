#pragma once

#include <functional>
#include <ostream>
#include <string>

namespace mmae {

// Writes via a temp file in the same directory, then renames into place.
void write_file_atomic(const std::string& path, const std::function<void(std::ostream&)>& writer);

}  // namespace mmae
