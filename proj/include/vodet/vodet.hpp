#pragma once

#include "vodet/detector.hpp"
#include "vodet/eval.hpp"
#include "vodet/flow.hpp"
#include "vodet/geometry.hpp"
#include "vodet/harness.hpp"
#include "vodet/image.hpp"
#include "vodet/inputs.hpp"
#include "vodet/losses.hpp"
#include "vodet/nn.hpp"
#include "vodet/random.hpp"
#include "vodet/synthdata.hpp"
