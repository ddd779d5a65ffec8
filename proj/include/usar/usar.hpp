#pragma once

#include "usar/rng.hpp"
#include "usar/world.hpp"
#include "usar/areagraph.hpp"
#include "usar/features.hpp"
#include "usar/neural.hpp"
#include "usar/datapipe.hpp"
#include "usar/agents.hpp"
#include "usar/liveserve.hpp"
