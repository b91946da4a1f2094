#pragma once

// Command-line front end. Every command writes <out>/manifest.json recording
// arguments, effective options, input and output hashes and timestamps; the
// `replay` command reruns a command from such a manifest and compares output
// hashes.
//
// Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 data/shortfall,
// 4 training divergence. Failures print one JSON object on stderr:
//   {"error": {"code": 3, "type": "shortfall", "message": "...", ...}}

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace spurgen::cli {

/// Bad flags or unresolvable references; maps to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDivergence = 4;

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kModelDirEnv = "SPURGEN_MODEL_DIR";
inline constexpr const char* kCacheDirEnv = "SPURGEN_CACHE_DIR";

}  // namespace spurgen::cli
