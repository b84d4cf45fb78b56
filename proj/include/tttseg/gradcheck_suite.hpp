#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tttseg {

// One named finite-difference check over a library operation.
struct SuiteCheck {
  std::string name;
  double threshold = 1e-5;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

struct SuiteOptions {
  std::string only;     // run only checks whose name contains this substring
  std::string perturb;  // inject a broken backward rule into the named check
  // Seed chosen so no LeakyReLU preactivation of the micro model sits within
  // central-difference range of its kink (the check is invalid at such points).
  std::uint64_t seed = 3;
  std::size_t micro_model_coords = 1000;  // per-parameter cap for the full model
};

// Runs every differentiable operation through gradcheck: tensor ops, nn ops,
// the ttt step and scan, the loss, and a 3-stage 16x16 micro model (checked
// at 1e-4; everything else at 1e-5).
std::vector<SuiteCheck> run_gradcheck_suite(const SuiteOptions& opts = {});

}  // namespace tttseg
