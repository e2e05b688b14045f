// Core estimator library. The harness (config, experiment) is included separately.
#pragma once

#include "obsfit/bspline.hpp"
#include "obsfit/cedr.hpp"
#include "obsfit/density.hpp"
#include "obsfit/error.hpp"
#include "obsfit/loss.hpp"
#include "obsfit/model_selection.hpp"
#include "obsfit/moments.hpp"
#include "obsfit/observation.hpp"
#include "obsfit/optimizer.hpp"
#include "obsfit/rkhs.hpp"
#include "obsfit/state_model.hpp"
