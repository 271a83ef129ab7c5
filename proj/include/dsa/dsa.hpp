#pragma once

#include "dsa/constraints.hpp"
#include "dsa/diagnostics.hpp"
#include "dsa/errors.hpp"
#include "dsa/experiment.hpp"
#include "dsa/gossip.hpp"
#include "dsa/power_alloc.hpp"
#include "dsa/quadratic.hpp"
#include "dsa/rng.hpp"
#include "dsa/sa_core.hpp"
#include "dsa/stacked.hpp"
