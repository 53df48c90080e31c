#pragma once

#include "dynflow/binio.hpp"
#include "dynflow/config.hpp"
#include "dynflow/engine.hpp"
#include "dynflow/errors.hpp"
#include "dynflow/flops.hpp"
#include "dynflow/flownet.hpp"
#include "dynflow/losses.hpp"
#include "dynflow/metrics.hpp"
#include "dynflow/ops.hpp"
#include "dynflow/optim.hpp"
#include "dynflow/params.hpp"
#include "dynflow/policy.hpp"
#include "dynflow/rng.hpp"
#include "dynflow/synthdata.hpp"
#include "dynflow/tensor.hpp"
