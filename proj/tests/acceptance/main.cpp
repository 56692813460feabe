#include <cstdio>
#include <cstdlib>
#include <string>

#include "suite.hpp"

int main(int argc, char** argv) {
  acceptance::Options o;
  if (argc > 1) o.seed = std::strtoull(argv[1], nullptr, 10);
  bool all = true;
  acceptance::run_all(o, [&](const acceptance::Result& r) {
    std::printf("%s\n", acceptance::format(r).c_str());
    std::fflush(stdout);
    all = all && r.pass;
  });
  return all ? 0 : 1;
}
