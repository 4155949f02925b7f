#pragma once

#include "dsl/clustering.hpp"
#include "dsl/core_model.hpp"
#include "dsl/dynamic_subspace.hpp"
#include "dsl/evaluation.hpp"
#include "dsl/metric_objectives.hpp"
#include "dsl/wss.hpp"
