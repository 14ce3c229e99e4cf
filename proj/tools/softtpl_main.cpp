#include <iostream>
#include <string>
#include <vector>

#include "softtpl/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return softtpl::run(args, std::cout, std::cerr);
}
