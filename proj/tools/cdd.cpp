#include <iostream>

#include "cdd/cli.hpp"

int main(int argc, char** argv) { return cdd::cli::run(argc, argv, std::cout, std::cerr); }
