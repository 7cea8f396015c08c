#include <iostream>
#include <string>
#include <vector>

#include "offkd/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return offkd::cli::run(args, std::cout, std::cerr);
}
