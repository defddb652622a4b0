#pragma once

#include "nlbss/core.hpp"
#include "nlbss/numeric.hpp"
#include "nlbss/parallel.hpp"
#include "nlbss/linalg.hpp"
#include "nlbss/signal_io.hpp"
#include "nlbss/phase_binning.hpp"
#include "nlbss/local_frames.hpp"
#include "nlbss/weights.hpp"
#include "nlbss/coordinate_map.hpp"
#include "nlbss/separability.hpp"
#include "nlbss/analysis.hpp"
#include "nlbss/pipeline.hpp"
