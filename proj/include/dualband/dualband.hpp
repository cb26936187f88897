#pragma once

#include "dualband/error.hpp"
#include "dualband/rng.hpp"
#include "dualband/core.hpp"
#include "dualband/io_util.hpp"
#include "dualband/parallel.hpp"
#include "dualband/image_ops.hpp"
#include "dualband/gauge_sim.hpp"
#include "dualband/trajectory_io.hpp"
#include "dualband/tokenizer.hpp"
#include "dualband/world_model.hpp"
#include "dualband/scoring.hpp"
#include "dualband/conformal.hpp"
#include "dualband/eval.hpp"
#include "dualband/pipeline.hpp"
