#pragma once

// Umbrella header.

#include "drc/bridge.hpp"
#include "drc/common.hpp"
#include "drc/dist_ops.hpp"
#include "drc/fabric.hpp"
#include "drc/learner.hpp"
#include "drc/pilot.hpp"
#include "drc/pipeline.hpp"
#include "drc/rng.hpp"
#include "drc/table.hpp"
#include "drc/table_io.hpp"
#include "drc/table_ops.hpp"
#include "drc/wire.hpp"
