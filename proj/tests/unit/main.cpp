#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "ferl/log.hpp"

int main(int argc, char** argv) {
  ferl::set_warnings_enabled(false);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}
