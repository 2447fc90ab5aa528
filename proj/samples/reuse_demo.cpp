// Trains a target model with and without the reuse regularizer on one seed of
// the synthetic benchmark.
#include <cstdio>

#include "retina/reuse.hpp"
#include "retina/synthetic.hpp"

using namespace retina;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const auto dom = synthetic::make_synthetic_domains({}, seed);
  for (int m = 0; m < static_cast<int>(dom.sources.size()); ++m)
    std::printf("source %d on target test: %.3f\n", m,
                nn::accuracy(dom.sources.models[m].output(dom.target_test.x), dom.target_test.labels));

  reuse::ReuseConfig cfg;
  cfg.opt.seed = seed;
  cfg.gamma = 0.0;
  const auto base = reuse::train_supervised(dom.target, cfg, &dom.target_test);
  cfg.gamma = 5.0;
  const auto reused = reuse::train_target(dom.sources, dom.target, cfg, &dom.target_test);
  std::printf("baseline %.3f   reuse %.3f\n", base.trace.back().heldout, reused.trace.back().heldout);
}
