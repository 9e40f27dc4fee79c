#pragma once

#include "catk/errors.hpp"
#include "catk/harness.hpp"
#include "catk/metrics.hpp"
#include "catk/policy.hpp"
#include "catk/random.hpp"
#include "catk/rollout.hpp"
#include "catk/scenario.hpp"
#include "catk/training.hpp"
#include "catk/vocabulary.hpp"
#include "catk/world.hpp"
