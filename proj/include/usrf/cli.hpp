#pragma once

#include <iosfwd>

namespace usrf::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kInputError = 2;
inline constexpr int kEmptyResult = 3;
inline constexpr int kNumericalFailure = 4;
inline constexpr int kArtifactMismatch = 5;

/// Entry point of the `usrfnet` tool: simulate, ingest, train, eval, predict,
/// export-embedding, baseline. Summaries go to `out`, diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace usrf::cli
