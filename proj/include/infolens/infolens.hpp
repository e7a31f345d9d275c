#pragma once

#include "infolens/error.hpp"
#include "infolens/random.hpp"
#include "infolens/linalg.hpp"
#include "infolens/infotheory.hpp"
#include "infolens/trialset.hpp"
#include "infolens/genmodel.hpp"
#include "infolens/network.hpp"
#include "infolens/analysis.hpp"
#include "infolens/io.hpp"
#include "infolens/svg.hpp"
#include "infolens/config.hpp"
#include "infolens/store.hpp"
#include "infolens/pipeline.hpp"
