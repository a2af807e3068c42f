#pragma once

#include "evnas/config.hpp"
#include "evnas/dataset.hpp"
#include "evnas/evaluation.hpp"
#include "evnas/evolution.hpp"
#include "evnas/experiment.hpp"
#include "evnas/genotype_io.hpp"
#include "evnas/matrix.hpp"
#include "evnas/nn_ops.hpp"
#include "evnas/rng.hpp"
#include "evnas/search_space.hpp"
#include "evnas/stats.hpp"
#include "evnas/supernet.hpp"
#include "evnas/tensor.hpp"
#include "evnas/trainer.hpp"
