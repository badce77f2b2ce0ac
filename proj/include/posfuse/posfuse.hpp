#pragma once

#include "autodiff.hpp"
#include "batch.hpp"
#include "bench.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "fusion.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "posenc.hpp"
#include "rng.hpp"
#include "svg.hpp"
#include "tensor.hpp"
#include "train.hpp"
