#include <iostream>

#include "langmpc/cli.hpp"

int main(int argc, char** argv) {
  return langmpc::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
