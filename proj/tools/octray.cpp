#include <iostream>

#include "octray/cli.hpp"

int main(int argc, char** argv) { return octray::cli::run_cli(argc, argv, std::cout, std::cerr); }
