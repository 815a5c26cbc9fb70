#pragma once

#include "hybridmt/calibration.hpp"
#include "hybridmt/core.hpp"
#include "hybridmt/decider.hpp"
#include "hybridmt/evalharness.hpp"
#include "hybridmt/ngram_lm.hpp"
#include "hybridmt/router.hpp"
#include "hybridmt/scoring.hpp"
