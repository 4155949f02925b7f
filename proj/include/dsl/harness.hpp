#pragma once

#include "dsl/dsl.hpp"
#include "dsl/harness/checkpoint.hpp"
#include "dsl/harness/config.hpp"
#include "dsl/harness/experiment.hpp"
#include "dsl/harness/export.hpp"
#include "dsl/harness/image_folder.hpp"
#include "dsl/harness/plots.hpp"
#include "dsl/harness/synthetic.hpp"
