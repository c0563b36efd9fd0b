#pragma once

#include "nhmm/chain.hpp"
#include "nhmm/em.hpp"
#include "nhmm/forward_backward.hpp"
#include "nhmm/inference.hpp"
#include "nhmm/io.hpp"
#include "nhmm/parameters.hpp"
#include "nhmm/simulate.hpp"
#include "nhmm/types.hpp"
