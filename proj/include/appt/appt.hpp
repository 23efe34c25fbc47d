#pragma once

#include "appt/analysis.hpp"
#include "appt/attention.hpp"
#include "appt/autodiff.hpp"
#include "appt/checkpoint.hpp"
#include "appt/config_json.hpp"
#include "appt/error.hpp"
#include "appt/gradcheck.hpp"
#include "appt/mlp.hpp"
#include "appt/network.hpp"
#include "appt/param_store.hpp"
#include "appt/pointcloud.hpp"
#include "appt/random.hpp"
#include "appt/selftest.hpp"
#include "appt/tensor.hpp"
#include "appt/training.hpp"
