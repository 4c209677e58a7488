#include <iostream>

#include "cli_app.hpp"

int main(int argc, char** argv) { return tokmerge::cli::run_cli(argc, argv, std::cout, std::cerr); }
