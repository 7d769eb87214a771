#pragma once

#include <iosfwd>

namespace ncatlas::cli {

// Entry point behind the `ncatlas` binary. Returns the process exit code:
// 0 on success, 1 for a library error, 2 for a usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace ncatlas::cli
