#pragma once

#include "topforge/archive.hpp"
#include "topforge/baselines.hpp"
#include "topforge/core.hpp"
#include "topforge/env.hpp"
#include "topforge/errors.hpp"
#include "topforge/instance_gen.hpp"
#include "topforge/policy.hpp"
#include "topforge/random.hpp"
#include "topforge/tensor.hpp"
#include "topforge/trainer.hpp"
