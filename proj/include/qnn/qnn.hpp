#pragma once

#include "qnn/arch.hpp"
#include "qnn/checkpoint.hpp"
#include "qnn/costmodel.hpp"
#include "qnn/data.hpp"
#include "qnn/error.hpp"
#include "qnn/init.hpp"
#include "qnn/layers.hpp"
#include "qnn/linalg.hpp"
#include "qnn/network.hpp"
#include "qnn/neurons.hpp"
#include "qnn/rng.hpp"
#include "qnn/tensor.hpp"
#include "qnn/training.hpp"
