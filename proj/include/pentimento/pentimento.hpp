#pragma once

// Everything except the HTTP service (service.hpp), which pulls in httplib.

#include "config.hpp"
#include "error.hpp"
#include "gradcheck.hpp"
#include "image.hpp"
#include "io.hpp"
#include "loss.hpp"
#include "network.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "prep.hpp"
#include "random_net.hpp"
#include "reconstruct.hpp"
#include "tensor.hpp"
#include "weights.hpp"
