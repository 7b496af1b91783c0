#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace detox {

// Exit codes: 0 success, 2 usage or configuration error, 1 any other failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace detox
