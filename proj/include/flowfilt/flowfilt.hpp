#pragma once

#include "flowfilt/analytic_flow.hpp"
#include "flowfilt/baselines.hpp"
#include "flowfilt/bearings.hpp"
#include "flowfilt/experiment.hpp"
#include "flowfilt/flow_ode.hpp"
#include "flowfilt/gaussian.hpp"
#include "flowfilt/naedh.hpp"
#include "flowfilt/random.hpp"
#include "flowfilt/random_instances.hpp"
#include "flowfilt/verification.hpp"
