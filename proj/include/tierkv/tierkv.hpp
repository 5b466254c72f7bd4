// Copyright (C) 2026 The tierkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tierkv/codecs.hpp"
#include "tierkv/engine.hpp"
#include "tierkv/errors.hpp"
#include "tierkv/model.hpp"
#include "tierkv/policy.hpp"
#include "tierkv/profiler.hpp"
#include "tierkv/sim.hpp"
#include "tierkv/workload.hpp"
