#include <iostream>

#include "merlin/cli.hpp"

int main(int argc, char** argv) { return merlin::run_cli(argc, argv, std::cout, std::cerr); }
