#ifndef HOPFLOW_HOPFLOW_HPP
#define HOPFLOW_HOPFLOW_HPP

#include "common.hpp"
#include "io.hpp"
#include "graph.hpp"
#include "hops.hpp"
#include "params.hpp"
#include "autodiff.hpp"
#include "objectives.hpp"
#include "model.hpp"
#include "memory.hpp"
#include "train.hpp"
#include "config.hpp"
#include "gradcheck.hpp"
#include "toy.hpp"
#include "experiments.hpp"

#endif
