#pragma once

#include "bibldr/data.hpp"
#include "bibldr/eval.hpp"
#include "bibldr/numcore.hpp"
#include "bibldr/proto/encoder.hpp"
#include "bibldr/seqmodel.hpp"
