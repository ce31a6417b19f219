#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gsstyle::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitEditorTimeout = 2;
inline constexpr int kExitDiverged = 3;

// Entry point shared by the executable and the tests. args[0] is the program
// name. Messages go to out / err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gsstyle::cli
