#include <string>
#include <vector>

#include "rsmfc/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return rsmfc::run_cli(args);
}
