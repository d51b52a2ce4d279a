#include <iostream>
#include <string>
#include <vector>

#include "lpdnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lpdnet::cli_run(args, std::cout, std::cerr);
}
