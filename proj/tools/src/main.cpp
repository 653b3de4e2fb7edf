#include <iostream>

#include "scoregrade_cli/cli.hpp"

int main(int argc, char** argv) { return scoregrade::cli::dispatch(argc, argv, std::cout, std::cerr); }
