#pragma once

#include <iosfwd>

namespace tsf::cli {

/// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tsf::cli
