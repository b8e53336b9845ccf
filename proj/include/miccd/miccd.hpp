#pragma once

#include "miccd/config.hpp"
#include "miccd/csv.hpp"
#include "miccd/decision.hpp"
#include "miccd/error.hpp"
#include "miccd/flat_surrogate.hpp"
#include "miccd/gmm.hpp"
#include "miccd/graph.hpp"
#include "miccd/harness.hpp"
#include "miccd/metrics.hpp"
#include "miccd/model.hpp"
#include "miccd/nn.hpp"
#include "miccd/pipeline.hpp"
#include "miccd/rng.hpp"
#include "miccd/scm.hpp"
#include "miccd/surrogate.hpp"
#include "miccd/vae.hpp"
