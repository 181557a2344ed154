// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "smerge/checkpoint.hpp"
#include "smerge/consensus.hpp"
#include "smerge/deltas.hpp"
#include "smerge/error.hpp"
#include "smerge/linalg.hpp"
#include "smerge/merge.hpp"
#include "smerge/parallel.hpp"
#include "smerge/report.hpp"
#include "smerge/synth.hpp"
