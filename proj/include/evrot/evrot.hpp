#pragma once

// Library surface without the command-line layer.
#include "evrot/backend.hpp"
#include "evrot/config.hpp"
#include "evrot/error.hpp"
#include "evrot/events.hpp"
#include "evrot/frontend.hpp"
#include "evrot/geometry.hpp"
#include "evrot/iwe.hpp"
#include "evrot/metrics.hpp"
#include "evrot/optimizer.hpp"
#include "evrot/parallel.hpp"
#include "evrot/simulator.hpp"
#include "evrot/trajectory.hpp"
