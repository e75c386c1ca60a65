#pragma once

#include "ecqx/tensor.hpp"
#include "ecqx/nn.hpp"
#include "ecqx/checkpoint.hpp"
#include "ecqx/lrp.hpp"
#include "ecqx/quantizer.hpp"
#include "ecqx/codec.hpp"
#include "ecqx/report.hpp"
#include "ecqx/data.hpp"
#include "ecqx/qat.hpp"
#include "ecqx/config.hpp"
