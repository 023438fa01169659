#pragma once

namespace steerlab::cli {

// Parses argv, runs one subcommand and returns the process exit code.
int run(int argc, char** argv);

}  // namespace steerlab::cli
