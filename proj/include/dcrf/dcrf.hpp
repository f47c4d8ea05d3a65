#ifndef DCRF_DCRF_HPP
#define DCRF_DCRF_HPP

#include "dcrf/common.hpp"
#include "dcrf/data.hpp"
#include "dcrf/features.hpp"
#include "dcrf/harness.hpp"
#include "dcrf/serialize.hpp"
#include "dcrf/solver.hpp"
#include "dcrf/theory.hpp"

#endif  // DCRF_DCRF_HPP
