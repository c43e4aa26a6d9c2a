// Trains (or finds cached) the toy model for one seed.

#include <cstdlib>
#include <iostream>

#include "fixtures.hpp"
#include "shortlvlm/eval_harness.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: train_fixtures <seed>\n";
    return 2;
  }
  const std::uint64_t seed = std::strtoull(argv[1], nullptr, 10);
  const auto& m = fixtures::trained_model(seed);
  std::cout << "seed " << seed << " eval accuracy " << shortlvlm::accuracy(m, fixtures::evaluation(seed), 4) << '\n';
  return 0;
}
