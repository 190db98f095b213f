#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sparsevd {

// Dispatches one command (train / eval / prune / report) with its arguments,
// writing human output to `out` and problems to `err`.
//
// Exit codes: 0 success; 2 unusable command line or config; 3 missing or
// unusable data/artifact files; 4 the run diverged (last good checkpoint is
// kept on disk); 1 anything unexpected.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sparsevd
