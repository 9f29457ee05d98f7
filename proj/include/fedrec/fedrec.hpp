#pragma once

#include "fedrec/aggregation.hpp"
#include "fedrec/core_mf.hpp"
#include "fedrec/datasets.hpp"
#include "fedrec/error.hpp"
#include "fedrec/experiment.hpp"
#include "fedrec/federation.hpp"
#include "fedrec/privacy_attack.hpp"
#include "fedrec/pseudo_items.hpp"
#include "fedrec/random.hpp"
