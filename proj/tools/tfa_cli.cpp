#include <iostream>

#include "tfa/cli.hpp"

int main(int argc, char** argv) { return tfa::cli::dispatch(argc, argv, std::cout, std::cerr); }
