// Copyright 2026 The netpretrain Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "netpretrain/autodiff/ops.hpp"
#include "netpretrain/autodiff/tensor.hpp"
#include "netpretrain/checkpoint.hpp"
#include "netpretrain/config.hpp"
#include "netpretrain/downstream.hpp"
#include "netpretrain/graphformer.hpp"
#include "netpretrain/masking.hpp"
#include "netpretrain/netdata.hpp"
#include "netpretrain/objectives.hpp"
#include "netpretrain/optim.hpp"
#include "netpretrain/random.hpp"
#include "netpretrain/ranking.hpp"
#include "netpretrain/synthgen.hpp"
#include "netpretrain/tokenizer.hpp"
#include "netpretrain/trainer.hpp"
