#include <iostream>

#include "cdl/cli.hpp"

int main(int argc, char** argv) { return cdl::cli::run(argc, argv, std::cout, std::cerr); }
