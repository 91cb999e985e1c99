#pragma once

#include "quantal/add.hpp"
#include "quantal/elimination.hpp"
#include "quantal/error.hpp"
#include "quantal/jtree.hpp"
#include "quantal/metrics.hpp"
#include "quantal/model.hpp"
#include "quantal/quantize.hpp"
