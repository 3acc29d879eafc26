#pragma once

#include <ostream>

#include "merlin/family.hpp"

namespace merlin {

/// Callbacks available to model text run from the command line. `logl` is
/// the Gaussian log-density with ancillary parameter 1 as log sd.
void register_builtin_callbacks(CallbackRegistry& registry);

/// `merlin fit ...` / `merlin predict ...`. Returns 0 on success, 2 when the
/// fit did not converge, 1 on usage or data errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace merlin
