#pragma once

#include <string>
#include <vector>

#include "gendistill/metrics.hpp"

namespace gendistill {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point behind the gendistill executable.
int run_cli(int argc, const char* const* argv);

/// Markdown summary of every metrics.json below `dir`; also writes one SVG
/// loss curve per run next to report.md. Returns the markdown.
std::string write_report(const std::string& dir);

/// Polyline plot of each loss component over epochs.
std::string loss_curve_svg(const MetricsReport& report);

}  // namespace gendistill
