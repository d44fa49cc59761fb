#pragma once

#include <spdlog/spdlog.h>

namespace lapr {

/// Diagnostics logger on stderr. Level comes from LAPR_LOG
/// (error, warn, info, debug); default warn.
spdlog::logger& log();

}  // namespace lapr
