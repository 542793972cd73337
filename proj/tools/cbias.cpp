#include <iostream>

#include "cbias/commands.hpp"

int main(int argc, char** argv) {
  return cbias::cli::main_entry(argc, argv, std::cout, std::cerr);
}
