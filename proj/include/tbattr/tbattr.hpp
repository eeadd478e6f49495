#pragma once

#include "tbattr/errors.hpp"
#include "tbattr/tensor.hpp"
#include "tbattr/autograd.hpp"
#include "tbattr/ops.hpp"
#include "tbattr/random.hpp"
#include "tbattr/params.hpp"
#include "tbattr/data_model.hpp"
#include "tbattr/image_io.hpp"
#include "tbattr/synthetic.hpp"
#include "tbattr/backbone.hpp"
#include "tbattr/attribute_branch.hpp"
#include "tbattr/attention.hpp"
#include "tbattr/detector.hpp"
#include "tbattr/model.hpp"
#include "tbattr/evaluation.hpp"
#include "tbattr/training.hpp"
#include "tbattr/config.hpp"
#include "tbattr/plot.hpp"
#include "tbattr/cli.hpp"
