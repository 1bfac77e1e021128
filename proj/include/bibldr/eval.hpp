#pragma once

#include "bibldr/eval/metrics.hpp"
#include "bibldr/eval/protocols.hpp"
#include "bibldr/eval/report.hpp"
