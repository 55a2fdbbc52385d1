// Copyright Contributors to the gsvox Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "gsvox/binning.hpp"
#include "gsvox/core.hpp"
#include "gsvox/geometry.hpp"
#include "gsvox/grad.hpp"
#include "gsvox/io.hpp"
#include "gsvox/labeler.hpp"
#include "gsvox/losses.hpp"
#include "gsvox/parallel.hpp"
#include "gsvox/query.hpp"
#include "gsvox/reference.hpp"
#include "gsvox/render2d.hpp"
#include "gsvox/splat.hpp"
#include "gsvox/synthetic.hpp"
