#include <iostream>

#include "ftex/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ftex::run_cli(args, std::cout, std::cerr);
}
