#include "rhp/cli.hpp"

int main(int argc, char** argv) {
  return rhp::cli(std::vector<std::string>(argv + 1, argv + argc));
}
