#pragma once

#include "rmoe/checkpoint.hpp"
#include "rmoe/data.hpp"
#include "rmoe/eval.hpp"
#include "rmoe/layers.hpp"
#include "rmoe/models.hpp"
#include "rmoe/tensor.hpp"
#include "rmoe/training.hpp"
