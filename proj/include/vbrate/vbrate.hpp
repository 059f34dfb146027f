#pragma once

// Umbrella header.

#include "vbrate/core.hpp"
#include "vbrate/divergence.hpp"
#include "vbrate/expfam.hpp"
#include "vbrate/experiments.hpp"
#include "vbrate/gsm.hpp"
#include "vbrate/harness.hpp"
#include "vbrate/mixture.hpp"
#include "vbrate/piecewise.hpp"
#include "vbrate/quadrature.hpp"
#include "vbrate/regression.hpp"
#include "vbrate/trunc_gauss.hpp"
