#include <iostream>

#include "microexp/cli.hpp"

int main(int argc, char** argv) { return microexp::cli_main(argc, argv, std::cout, std::cerr); }
