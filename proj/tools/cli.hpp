#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bncap::cli {

/// Runs one CLI invocation. `args` excludes the program name.
/// Returns 0 on success, 1 on runtime/validation failure, 2 on usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bncap::cli
