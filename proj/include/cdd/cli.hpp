#pragma once

#include <iosfwd>

namespace cdd::cli {

// Exit codes: 0 ok, 1 verification failure, 2 config/usage, 3 numeric, 4 io.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Version string baked in at configure time.
const char* version();

}  // namespace cdd::cli
