#pragma once

#include "demask/bench.hpp"
#include "demask/decoding.hpp"
#include "demask/error.hpp"
#include "demask/model.hpp"
#include "demask/predictor.hpp"
#include "demask/sampling.hpp"
#include "demask/selection.hpp"
#include "demask/tv.hpp"
#include "demask/verification.hpp"
