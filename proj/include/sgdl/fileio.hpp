#ifndef SGDL_FILEIO_HPP
#define SGDL_FILEIO_HPP

#include <string>

namespace sgdl {

/// Whole file as bytes. Throws Error naming the path when it cannot be opened.
std::string read_file(const std::string &path);

/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::string &path, const std::string &bytes);

} // namespace sgdl

#endif // SGDL_FILEIO_HPP
