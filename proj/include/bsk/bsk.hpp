#pragma once

#include "core.hpp"
#include "path.hpp"
#include "signature.hpp"
#include "kernel.hpp"
#include "linear_solver.hpp"
#include "lbfgs.hpp"
#include "nonlinear_solver.hpp"
#include "streaming.hpp"
#include "lift.hpp"
#include "stochastic.hpp"
#include "experiments.hpp"
