#pragma once

// Everything except file I/O (image_io.hpp, dataset.hpp), which needs libpng.

#include "wricnet/checkpoint.hpp"
#include "wricnet/config.hpp"
#include "wricnet/evaluation.hpp"
#include "wricnet/gradcheck.hpp"
#include "wricnet/training.hpp"
