#pragma once

#include "deepqc/config.hpp"
#include "deepqc/csv.hpp"
#include "deepqc/error.hpp"
#include "deepqc/evaluation.hpp"
#include "deepqc/lstm.hpp"
#include "deepqc/model.hpp"
#include "deepqc/model_io.hpp"
#include "deepqc/rules.hpp"
#include "deepqc/series.hpp"
#include "deepqc/sg_filter.hpp"
#include "deepqc/synth.hpp"
#include "deepqc/tape.hpp"
#include "deepqc/tensor.hpp"
#include "deepqc/training.hpp"
