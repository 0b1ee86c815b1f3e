#pragma once

#include "promptreg/error.hpp"
#include "promptreg/grid.hpp"
#include "promptreg/geometry.hpp"
#include "promptreg/codec.hpp"
#include "promptreg/io.hpp"
#include "promptreg/segmenter.hpp"
#include "promptreg/remote_segmenter.hpp"
#include "promptreg/transform.hpp"
#include "promptreg/prompt_search.hpp"
#include "promptreg/marginalization.hpp"
#include "promptreg/deformation.hpp"
#include "promptreg/registration.hpp"
#include "promptreg/synthetic.hpp"
#include "promptreg/overlay.hpp"
#include "promptreg/pipeline.hpp"
#include "promptreg/service.hpp"
