#pragma once

#include "lsf/array.hpp"
#include "lsf/data.hpp"
#include "lsf/error.hpp"
#include "lsf/hash.hpp"
#include "lsf/hungarian.hpp"
#include "lsf/labelspace.hpp"
#include "lsf/metrics.hpp"
#include "lsf/model.hpp"
#include "lsf/pgm.hpp"
#include "lsf/rng.hpp"
#include "lsf/synth.hpp"
#include "lsf/train.hpp"
