#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dualpath {

// File names inside a stage directory.
inline constexpr const char* kCheckpointFileName = "checkpoint.bin";
inline constexpr const char* kLogFileName = "train_log.tsv";

}  // namespace dualpath

namespace dualpath::cli {

// Runs one command line (args exclude the program name). Diagnostics go to
// `err` as a single line; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace dualpath::cli
