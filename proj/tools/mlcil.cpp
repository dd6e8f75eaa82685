#include <iostream>
#include <string>
#include <vector>

#include "mlcil/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mlcil::cli::run(args, std::cout, std::cerr);
}
