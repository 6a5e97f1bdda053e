#pragma once

#include "lottalora/artifact.hpp"
#include "lottalora/autograd.hpp"
#include "lottalora/cost.hpp"
#include "lottalora/data.hpp"
#include "lottalora/error.hpp"
#include "lottalora/init_family.hpp"
#include "lottalora/lotta_layer.hpp"
#include "lottalora/model.hpp"
#include "lottalora/optim.hpp"
#include "lottalora/prng.hpp"
#include "lottalora/tensor.hpp"
#include "lottalora/train.hpp"
