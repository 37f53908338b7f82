#pragma once

#include <string>
#include <vector>

namespace alignclip {

// Command-line driver: generate-data | train | eval | compare | project.
// Returns the process exit code: 0 success, 2 config error, 3 data error,
// 4 numerical abort. Every artifact-producing command echoes its fully
// resolved config (seeds included) into the output directory.
int run(int argc, const char* const* argv);

// Same driver for in-process callers; `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace alignclip
