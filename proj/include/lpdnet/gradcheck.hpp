#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lpdnet/network.hpp"

namespace lpdnet {

struct GradcheckEntry {
  std::string name;
  double rel_err = 0.0;
};

struct GradcheckResult {
  std::vector<GradcheckEntry> primitives;
  double worst_primitive = 0.0;
  std::string worst_primitive_name;
  double full_network = 0.0;
  std::string full_network_worst_param;
  std::size_t parameter_count = 0;

  bool primitives_pass(double threshold = 1e-6) const { return worst_primitive < threshold; }
  bool full_pass(double threshold = 1e-4) const { return full_network < threshold; }
};

// Toy profile small enough for an exhaustive finite-difference sweep.
NetworkConfig gradcheck_config();

// Finite-difference checks for every differentiable primitive.
std::vector<GradcheckEntry> gradcheck_primitives(std::uint64_t seed);

// Finite-difference check of the composed pipeline: descriptors for a small
// quadruplet of synthetic clouds through the lazy quadruplet loss.
GradcheckEntry gradcheck_full_network(const NetworkConfig& cfg, std::uint64_t seed,
                                      std::size_t* parameter_count = nullptr);

GradcheckResult run_gradcheck(const NetworkConfig& cfg, std::uint64_t seed);

}  // namespace lpdnet
