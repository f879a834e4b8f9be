#pragma once

#include "dsmgp/baselines.hpp"
#include "dsmgp/common.hpp"
#include "dsmgp/data.hpp"
#include "dsmgp/experiment.hpp"
#include "dsmgp/gp.hpp"
#include "dsmgp/graph_io.hpp"
#include "dsmgp/hyperopt.hpp"
#include "dsmgp/inference.hpp"
#include "dsmgp/kernels.hpp"
#include "dsmgp/linalg.hpp"
#include "dsmgp/metrics.hpp"
#include "dsmgp/rng.hpp"
#include "dsmgp/shared_cholesky.hpp"
#include "dsmgp/structure.hpp"
