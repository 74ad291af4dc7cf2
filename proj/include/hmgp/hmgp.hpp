#pragma once

#include "hmgp/cli.hpp"
#include "hmgp/common.hpp"
#include "hmgp/config.hpp"
#include "hmgp/dataio.hpp"
#include "hmgp/evaluation.hpp"
#include "hmgp/kernels.hpp"
#include "hmgp/model.hpp"
#include "hmgp/objectives.hpp"
#include "hmgp/optimizer.hpp"
