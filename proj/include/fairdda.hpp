#pragma once

#include "fairdda/errors.hpp"
#include "fairdda/tensor.hpp"
#include "fairdda/autodiff.hpp"
#include "fairdda/nn.hpp"
#include "fairdda/checkpoint.hpp"
#include "fairdda/data.hpp"
#include "fairdda/graph.hpp"
#include "fairdda/encoder.hpp"
#include "fairdda/objectives.hpp"
#include "fairdda/augment.hpp"
#include "fairdda/eval.hpp"
#include "fairdda/pretrain.hpp"
#include "fairdda/config.hpp"
#include "fairdda/train.hpp"
#include "fairdda/pipeline.hpp"
