#pragma once

#include <string>
#include <vector>

namespace surgecast::cli {

enum ExitCode : int {
    kOk = 0,
    kUsage = 2,    // bad flags or flag combinations
    kInput = 3,    // missing, unreadable or malformed inputs
    kRuntime = 4,  // failures while running a valid command
};

/// Entry point shared by the executable and the tests. args excludes the
/// program name.
int run(const std::vector<std::string>& args);

/// Lowercase hex SHA-256 of a file's bytes.
std::string file_sha256(const std::string& path);

}  // namespace surgecast::cli
