#pragma once

#include "esie/adapters.hpp"
#include "esie/dataset.hpp"
#include "esie/encoder.hpp"
#include "esie/errors.hpp"
#include "esie/metrics.hpp"
#include "esie/model.hpp"
#include "esie/numerics.hpp"
#include "esie/trainer.hpp"
#include "esie/wordpiece.hpp"
