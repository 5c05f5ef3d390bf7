#pragma once

// Umbrella header.

#include "qmap/acquisition.hpp"
#include "qmap/dataset.hpp"
#include "qmap/errors.hpp"
#include "qmap/evaluation.hpp"
#include "qmap/fit_result.hpp"
#include "qmap/lsq.hpp"
#include "qmap/nifti_io.hpp"
#include "qmap/nn.hpp"
#include "qmap/physics_decoder.hpp"
#include "qmap/self_supervised.hpp"
#include "qmap/signal_models.hpp"
#include "qmap/simulator.hpp"
#include "qmap/vae.hpp"
#include "qmap/version.hpp"
