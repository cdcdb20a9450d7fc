#pragma once

#include "hiap/checkpoint.hpp"
#include "hiap/config.hpp"
#include "hiap/cost_model.hpp"
#include "hiap/dataset.hpp"
#include "hiap/extraction.hpp"
#include "hiap/gating.hpp"
#include "hiap/gradcheck.hpp"
#include "hiap/model.hpp"
#include "hiap/objective.hpp"
#include "hiap/ops.hpp"
#include "hiap/optimizer.hpp"
#include "hiap/sweep.hpp"
#include "hiap/synthetic.hpp"
#include "hiap/tensor.hpp"
#include "hiap/trace_plot.hpp"
#include "hiap/trainer.hpp"
