// Builds a small segmentation network, runs it on a synthetic cloud and
// prints the output shape, parameter count and analytic FLOPs.
#include <cstdio>

#include "appt/appt.hpp"

int main() {
  using namespace appt;
  const NetworkConfig cfg = toy_run_config(Task::segmentation).network;
  const ParamStore params = init_network(cfg);

  const PointCloud cloud = generate_synthetic(ShapeKind::two_planes, 512, 42);
  const Tensor logits = segmentation_forward(cfg, params, cloud);

  std::printf("logits %zu x %zu\n", logits.rows(), logits.cols());
  std::printf("parameters %zu\n", param_count(cfg));
  std::printf("flops %llu\n", static_cast<unsigned long long>(count_flops(cfg, cloud.size()).total()));
}
