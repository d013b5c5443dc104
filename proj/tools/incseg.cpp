#include <iostream>

#include "incseg/app.hpp"

int main(int argc, char** argv) { return incseg::run_cli(argc, argv, std::cout, std::cerr); }
