#include <iostream>

#include "stapo/cli.hpp"

int main(int argc, char** argv) { return stapo::cli::run(argc, argv, std::cout, std::cerr); }
