// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands: synth, train, eval, prune, finetune,
// gen-train, impute, bench, census. Returns a process exit code
// (0 ok, 2 config error, 3 data error, 4 numeric failure, 1 anything else).

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmbeam::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace mmbeam::cli
