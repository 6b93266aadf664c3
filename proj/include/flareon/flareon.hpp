#pragma once

// Umbrella header.
#include "flareon/augment.hpp"
#include "flareon/config.hpp"
#include "flareon/data.hpp"
#include "flareon/defense.hpp"
#include "flareon/error.hpp"
#include "flareon/eval.hpp"
#include "flareon/gemm.hpp"
#include "flareon/io.hpp"
#include "flareon/kernels.hpp"
#include "flareon/model.hpp"
#include "flareon/optim.hpp"
#include "flareon/report.hpp"
#include "flareon/rng.hpp"
#include "flareon/tensor.hpp"
#include "flareon/train.hpp"
#include "flareon/trigger_bank.hpp"
#include "flareon/warp.hpp"
