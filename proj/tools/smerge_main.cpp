// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "smerge/cli.hpp"

int main(int argc, char** argv) {
    return smerge::cli::run(argc, argv, std::cout, std::cerr);
}
