#pragma once

#include "bibldr/data/behavior.hpp"
#include "bibldr/data/dataset.hpp"
#include "bibldr/data/splits.hpp"
#include "bibldr/data/synthetic.hpp"
