#pragma once

#include "bibldr/seqmodel/model.hpp"
#include "bibldr/seqmodel/train.hpp"
