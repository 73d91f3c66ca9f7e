#pragma once

// Umbrella header.

#include "reachplan/types.hpp"
#include "reachplan/geometry.hpp"
#include "reachplan/partition.hpp"
#include "reachplan/dynamics.hpp"
#include "reachplan/optim.hpp"
#include "reachplan/deviation.hpp"
#include "reachplan/reach.hpp"
#include "reachplan/sysid.hpp"
#include "reachplan/graph.hpp"
#include "reachplan/terminal.hpp"
#include "reachplan/planner.hpp"
#include "reachplan/io.hpp"
