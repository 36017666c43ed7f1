#include <string>
#include <vector>

#include "selfprune/cli.hpp"

int main(int argc, char** argv) {
  return selfprune::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
