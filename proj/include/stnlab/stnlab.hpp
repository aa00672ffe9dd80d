#pragma once

#include "stnlab/data.hpp"
#include "stnlab/errors.hpp"
#include "stnlab/experiments.hpp"
#include "stnlab/gradcheck.hpp"
#include "stnlab/io.hpp"
#include "stnlab/models.hpp"
#include "stnlab/rng.hpp"
#include "stnlab/st.hpp"
#include "stnlab/tensor.hpp"
