#include <iostream>
#include <string>
#include <vector>

#include "astra_cli/runner.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return astra_cli::run_command(args, std::cout, std::cerr);
}
