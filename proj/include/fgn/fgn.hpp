#pragma once

#include "fgn/bootstrap.hpp"
#include "fgn/climatology.hpp"
#include "fgn/common.hpp"
#include "fgn/crps.hpp"
#include "fgn/dataset.hpp"
#include "fgn/forecast.hpp"
#include "fgn/io.hpp"
#include "fgn/lorenz96.hpp"
#include "fgn/manifest.hpp"
#include "fgn/model.hpp"
#include "fgn/optim.hpp"
#include "fgn/rng.hpp"
#include "fgn/tape.hpp"
#include "fgn/tensor.hpp"
#include "fgn/train.hpp"
#include "fgn/verify.hpp"
