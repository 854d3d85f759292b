#include <malloc.h>

#include <iostream>

#include "dynasty/cli.hpp"

int main(int argc, char** argv) {
  // Keep freed tensor buffers in the heap instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return dynasty::run_cli(args, std::cout, std::cerr);
}
