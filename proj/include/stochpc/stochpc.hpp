#pragma once

#include "stochpc/errors.hpp"
#include "stochpc/numkit.hpp"
#include "stochpc/rng.hpp"
#include "stochpc/json_io.hpp"
#include "stochpc/plant.hpp"
#include "stochpc/model.hpp"
#include "stochpc/datadriven.hpp"
#include "stochpc/socp.hpp"
#include "stochpc/predictive.hpp"
#include "stochpc/equivalence.hpp"
#include "stochpc/experiment.hpp"
