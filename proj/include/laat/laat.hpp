// Umbrella header.
#pragma once

#include "laat/anchor_geometry.hpp"
#include "laat/attacks.hpp"
#include "laat/autodiff.hpp"
#include "laat/dataset.hpp"
#include "laat/encoder.hpp"
#include "laat/evaluation.hpp"
#include "laat/io.hpp"
#include "laat/objectives.hpp"
#include "laat/tensor.hpp"
#include "laat/training.hpp"
