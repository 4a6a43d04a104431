#pragma once

#include "binary_io.hpp"
#include "data.hpp"
#include "dual.hpp"
#include "error.hpp"
#include "experiment.hpp"
#include "interpret.hpp"
#include "primal.hpp"
#include "rng.hpp"
#include "sign_patterns.hpp"
#include "tensor.hpp"
