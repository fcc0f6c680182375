#pragma once

#include "crowdnet/errors.hpp"
#include "crowdnet/tensor.hpp"
#include "crowdnet/ops.hpp"
#include "crowdnet/param_store.hpp"
#include "crowdnet/layers.hpp"
#include "crowdnet/model.hpp"
#include "crowdnet/image_io.hpp"
#include "crowdnet/groundtruth.hpp"
#include "crowdnet/training.hpp"
#include "crowdnet/evaluation.hpp"
