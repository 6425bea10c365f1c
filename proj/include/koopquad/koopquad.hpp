#pragma once

// Everything except the YAML config layer (koopquad/config.hpp), which needs yaml-cpp.

#include "koopquad/types.hpp"
#include "koopquad/se3.hpp"
#include "koopquad/lift.hpp"
#include "koopquad/models.hpp"
#include "koopquad/analysis.hpp"
#include "koopquad/qp.hpp"
#include "koopquad/mpc.hpp"
#include "koopquad/io.hpp"
