// Copyright 2026 The dfinpaint Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dfinpaint/adam.hpp"
#include "dfinpaint/checkpoint.hpp"
#include "dfinpaint/common.hpp"
#include "dfinpaint/dataset.hpp"
#include "dfinpaint/df_vqgan.hpp"
#include "dfinpaint/frechet.hpp"
#include "dfinpaint/grad_check.hpp"
#include "dfinpaint/gradient_suite.hpp"
#include "dfinpaint/image_io.hpp"
#include "dfinpaint/masked_ops.hpp"
#include "dfinpaint/mp_s2s.hpp"
#include "dfinpaint/params.hpp"
#include "dfinpaint/pipeline.hpp"
#include "dfinpaint/rng.hpp"
#include "dfinpaint/tensor.hpp"
