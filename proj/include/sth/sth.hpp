#pragma once

#include "sth/analysis.hpp"
#include "sth/attention.hpp"
#include "sth/checkpoint.hpp"
#include "sth/config.hpp"
#include "sth/conv.hpp"
#include "sth/data_synth.hpp"
#include "sth/error.hpp"
#include "sth/layers.hpp"
#include "sth/layout.hpp"
#include "sth/network.hpp"
#include "sth/parallel.hpp"
#include "sth/rng.hpp"
#include "sth/sth_conv.hpp"
#include "sth/tensor.hpp"
#include "sth/tensor_io.hpp"
#include "sth/training.hpp"
#include "sth/verify.hpp"
