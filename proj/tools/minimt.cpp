#include <iostream>

#include "minimt/commands.hpp"

int main(int argc, char** argv) { return minimt::run_cli(argc, argv, std::cout, std::cerr); }
