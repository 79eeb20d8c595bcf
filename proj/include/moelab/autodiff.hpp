#pragma once

#include "moelab/autodiff/graph.hpp"
#include "moelab/autodiff/grad_check.hpp"
#include "moelab/autodiff/ops.hpp"
