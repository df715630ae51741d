#pragma once

#include "pulmoreg/core.hpp"
#include "pulmoreg/parallel.hpp"
#include "pulmoreg/lower_envelope.hpp"
#include "pulmoreg/image.hpp"
#include "pulmoreg/transform.hpp"
#include "pulmoreg/correspondence.hpp"
#include "pulmoreg/objective.hpp"
#include "pulmoreg/keypoints.hpp"
#include "pulmoreg/optimizer.hpp"
#include "pulmoreg/eval.hpp"
#include "pulmoreg/io.hpp"
#include "pulmoreg/phantom.hpp"
#include "pulmoreg/pipeline.hpp"
