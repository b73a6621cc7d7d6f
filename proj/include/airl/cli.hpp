#pragma once
//
// Command-line entry point:
//   generate <circle|circle-hard>       write a dataset CSV + sidecar
//   train <method>                      one run directory per seed
//   eval <eval-s|eval-d>                per-seed reports and a summary table
//   verify-theory <lemma1|prop1|pinsker|all>
//   export-boundary                     decision-boundary grid of a trained run
//
// Exit status: 0 on success, 1 when a run fails, 2 on invalid usage.
//

#include <functional>
#include <string>
#include <vector>

namespace airl {

int run_cli(int argc, const char* const* argv);

// Parses "3", "0..4" or "0,2,5".
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

// Runs independent tasks in up to `jobs` child processes (inline when
// jobs == 1). Returns the number of failed tasks.
int run_tasks(const std::vector<std::function<void()>>& tasks, int jobs);

}  // namespace airl
