#pragma once

#include "bibldr/numcore/checkpoint.hpp"
#include "bibldr/numcore/kernels.hpp"
#include "bibldr/numcore/layers.hpp"
#include "bibldr/numcore/ops.hpp"
#include "bibldr/numcore/optim.hpp"
#include "bibldr/numcore/random.hpp"
#include "bibldr/numcore/tape.hpp"
#include "bibldr/numcore/tensor.hpp"
