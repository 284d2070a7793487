#pragma once

#include "oodtest/bugfinder.hpp"
#include "oodtest/cluster.hpp"
#include "oodtest/error.hpp"
#include "oodtest/eval.hpp"
#include "oodtest/manifest.hpp"
#include "oodtest/random.hpp"
#include "oodtest/report.hpp"
#include "oodtest/split_io.hpp"
#include "oodtest/splitgen.hpp"
#include "oodtest/svg_plot.hpp"
#include "oodtest/toylab.hpp"
