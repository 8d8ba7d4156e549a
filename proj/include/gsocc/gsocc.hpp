#pragma once

#include "gsocc/error.hpp"
#include "gsocc/field.hpp"
#include "gsocc/fit.hpp"
#include "gsocc/fps.hpp"
#include "gsocc/gaussian.hpp"
#include "gsocc/grid.hpp"
#include "gsocc/io.hpp"
#include "gsocc/metrics.hpp"
#include "gsocc/parallel.hpp"
#include "gsocc/rays.hpp"
#include "gsocc/report.hpp"
#include "gsocc/rng.hpp"
#include "gsocc/scene.hpp"
#include "gsocc/slice.hpp"
