// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "distillseg/affinity.hpp"
#include "distillseg/composer.hpp"
#include "distillseg/core/config.hpp"
#include "distillseg/core/error.hpp"
#include "distillseg/core/numeric.hpp"
#include "distillseg/core/resize.hpp"
#include "distillseg/core/rng.hpp"
#include "distillseg/core/tensor.hpp"
#include "distillseg/data.hpp"
#include "distillseg/io/png.hpp"
#include "distillseg/kernel.hpp"
#include "distillseg/logitskd.hpp"
#include "distillseg/models.hpp"
#include "distillseg/nn/layers.hpp"
#include "distillseg/plot.hpp"
#include "distillseg/train.hpp"
