#include <iostream>

#include "tridet/cli.hpp"

int main(int argc, char** argv) { return tridet::cli::run(argc, argv, std::cout, std::cerr); }
