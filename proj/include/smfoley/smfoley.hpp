#pragma once

#include "smfoley/common.hpp"
#include "smfoley/token_space.hpp"
#include "smfoley/features.hpp"
#include "smfoley/nn.hpp"
#include "smfoley/backbone.hpp"
#include "smfoley/gradcheck.hpp"
#include "smfoley/controlnet.hpp"
#include "smfoley/sampler.hpp"
#include "smfoley/binary_io.hpp"
#include "smfoley/synthetic_data.hpp"
#include "smfoley/checkpoint.hpp"
#include "smfoley/trainer.hpp"
#include "smfoley/eval.hpp"
#include "smfoley/config.hpp"
