#include <iostream>

#include "crossblup/cli.hpp"

int main(int argc, char** argv) { return crossblup::run_cli(argc, argv, std::cout, std::cerr); }
