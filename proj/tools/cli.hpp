#pragma once

// Command-line front end. run() never calls exit(); it returns the process
// exit code:
//   0 success, 1 unexpected failure, 2 configuration error (bad flags,
//   config files, schema or checkpoint mismatch), 3 data or file-format
//   error, 4 numeric failure during training.

#include <ostream>

namespace hgt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

inline constexpr const char* kVersion = "0.1.0";

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hgt::cli
