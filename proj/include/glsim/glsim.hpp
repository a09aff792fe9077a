#pragma once

#include "error.hpp"
#include "tensor.hpp"
#include "trace.hpp"
#include "lexicon.hpp"
#include "scoring.hpp"
#include "presets.hpp"
#include "metrics.hpp"
#include "sweep.hpp"
#include "synth.hpp"
