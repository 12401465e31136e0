#pragma once

#include "pipesim/config.hpp"
#include "pipesim/errors.hpp"
#include "pipesim/experiment.hpp"
#include "pipesim/fault_tolerance.hpp"
#include "pipesim/latency_profile.hpp"
#include "pipesim/model_memory.hpp"
#include "pipesim/plan.hpp"
#include "pipesim/planner.hpp"
#include "pipesim/report.hpp"
#include "pipesim/simcore.hpp"
#include "pipesim/streamlib.hpp"
#include "pipesim/swap.hpp"
#include "pipesim/trace.hpp"
#include "pipesim/units.hpp"
