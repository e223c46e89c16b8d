#pragma once

// Umbrella header.
#include "analysis.hpp"
#include "embed.hpp"
#include "error.hpp"
#include "netft/feature_net.hpp"
#include "netft/training.hpp"
#include "parallel.hpp"
#include "pipeline.hpp"
#include "ridge.hpp"
#include "rng.hpp"
#include "signal.hpp"
#include "synthgen.hpp"
#include "tensor_io.hpp"
#include "types.hpp"
