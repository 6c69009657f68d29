#pragma once

#include "expost/backprop.hpp"
#include "expost/config.hpp"
#include "expost/data.hpp"
#include "expost/engine.hpp"
#include "expost/io.hpp"
#include "expost/kv_cache.hpp"
#include "expost/mask_matrix.hpp"
#include "expost/masking.hpp"
#include "expost/metrics.hpp"
#include "expost/model.hpp"
#include "expost/policy.hpp"
#include "expost/report.hpp"
#include "expost/position_layout.hpp"
#include "expost/rng.hpp"
#include "expost/rotary.hpp"
#include "expost/trainer.hpp"
#include "expost/types.hpp"
#include "expost/verify.hpp"
