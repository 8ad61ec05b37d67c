#pragma once

// Umbrella header: the whole library in one include.

#include "dfer/autodiff.hpp"
#include "dfer/bap.hpp"
#include "dfer/classify.hpp"
#include "dfer/config.hpp"
#include "dfer/data.hpp"
#include "dfer/encoder_config.hpp"
#include "dfer/encoders.hpp"
#include "dfer/errors.hpp"
#include "dfer/eval.hpp"
#include "dfer/gradcheck.hpp"
#include "dfer/jas.hpp"
#include "dfer/mat.hpp"
#include "dfer/metrics.hpp"
#include "dfer/model.hpp"
#include "dfer/optim.hpp"
#include "dfer/rng.hpp"
#include "dfer/sha256.hpp"
#include "dfer/tensor.hpp"
#include "dfer/tensorfile.hpp"
#include "dfer/transformer.hpp"
