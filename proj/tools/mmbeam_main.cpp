// Copyright (c) 2026, mmbeam authors
// SPDX-License-Identifier: Apache-2.0

#include "mmbeam/cli.hpp"

int main(int argc, char** argv) { return mmbeam::cli::run(argc, argv); }
