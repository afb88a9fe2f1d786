#pragma once

// Umbrella header for the whole toolkit.

#include "pcrobust/analysis.hpp"
#include "pcrobust/attacks.hpp"
#include "pcrobust/dataset.hpp"
#include "pcrobust/losses.hpp"
#include "pcrobust/network.hpp"
#include "pcrobust/ops.hpp"
#include "pcrobust/rng.hpp"
#include "pcrobust/tensor.hpp"
#include "pcrobust/training.hpp"

namespace pcrobust {
inline constexpr const char* kVersion = "0.1.0";
}
