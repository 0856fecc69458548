// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "seemore/errors.hpp"
#include "seemore/tensor.hpp"
#include "seemore/ops.hpp"
#include "seemore/fft.hpp"
#include "seemore/layers.hpp"
#include "seemore/config.hpp"
#include "seemore/blocks.hpp"
#include "seemore/model.hpp"
#include "seemore/accounting.hpp"
#include "seemore/checkpoint.hpp"
#include "seemore/imaging.hpp"
#include "seemore/training.hpp"
