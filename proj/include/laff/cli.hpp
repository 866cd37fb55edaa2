#pragma once

// Command-line front end: synth | train | eval | weights | select | rank | jaccard.
// Every command reads one RunConfig and writes only under the output directory.

#include <string>
#include <vector>

#include "laff/config.hpp"

namespace laff::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

void cmd_synth(const RunConfig& config, const std::string& out_dir);
void cmd_train(const RunConfig& config, const std::string& out_dir);
void cmd_eval(const RunConfig& config, const std::string& out_dir);
void cmd_weights(const RunConfig& config, const std::string& out_dir);
void cmd_select(const RunConfig& config, const std::string& out_dir);
void cmd_rank(const RunConfig& config, const std::string& out_dir);
void cmd_jaccard(const RunConfig& config, const std::string& out_dir);

/// Parses arguments, runs the command, and maps failures to exit codes.
/// Diagnostics go to standard error.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace laff::cli
