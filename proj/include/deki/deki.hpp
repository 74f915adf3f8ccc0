// deki: dropout ensemble Kalman inversion toolkit
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "deki/bench.hpp"
#include "deki/common.hpp"
#include "deki/config.hpp"
#include "deki/darcy.hpp"
#include "deki/ensemble.hpp"
#include "deki/io.hpp"
#include "deki/kl.hpp"
#include "deki/linearize.hpp"
#include "deki/localization.hpp"
#include "deki/lowerbound.hpp"
#include "deki/metrics.hpp"
#include "deki/model.hpp"
#include "deki/problem.hpp"
#include "deki/record.hpp"
#include "deki/rng.hpp"
#include "deki/schemes.hpp"
#include "deki/theory.hpp"
#include "deki/transport.hpp"
