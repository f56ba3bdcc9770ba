#include <sparsecoint/core.hpp>

#include <iostream>

int main() {
  std::cout << "sparsecoint CLI: subcommands land here as modules come online\n";
  return 0;
}
