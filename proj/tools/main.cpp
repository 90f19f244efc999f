#include <iostream>

#include "hstgcn/cli.hpp"

int main(int argc, char** argv) {
  return hstgcn::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
