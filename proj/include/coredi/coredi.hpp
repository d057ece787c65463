#pragma once

#include "coredi/autodiff.hpp"
#include "coredi/backbone.hpp"
#include "coredi/config.hpp"
#include "coredi/encoder.hpp"
#include "coredi/errors.hpp"
#include "coredi/flow.hpp"
#include "coredi/gradcheck.hpp"
#include "coredi/metrics.hpp"
#include "coredi/optim.hpp"
#include "coredi/projection.hpp"
#include "coredi/regularizers.hpp"
#include "coredi/report.hpp"
#include "coredi/rng.hpp"
#include "coredi/samplers.hpp"
#include "coredi/trainer.hpp"
