#pragma once

#include "driftlab/activations.hpp"
#include "driftlab/analysis.hpp"
#include "driftlab/error.hpp"
#include "driftlab/instrumentation.hpp"
#include "driftlab/network.hpp"
#include "driftlab/normalization.hpp"
#include "driftlab/numerics.hpp"
#include "driftlab/optim.hpp"
#include "driftlab/theory.hpp"
#include "driftlab/harness/config.hpp"
#include "driftlab/harness/datasets.hpp"
#include "driftlab/harness/emit.hpp"
#include "driftlab/harness/experiments.hpp"
#include "driftlab/harness/verify.hpp"
