#pragma once

#include "semfl/common/types.hpp"

namespace semfl::models {

/// Per-batch model output. Feature rows are L2-normalised.
struct ModelOutput {
  Matrix logits;    // B x C
  Matrix features;  // B x d
};

}  // namespace semfl::models
