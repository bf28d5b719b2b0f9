#pragma once

#include "segmob/common.hpp"
#include "segmob/timeline.hpp"
#include "segmob/ingest.hpp"
#include "segmob/spatial.hpp"
#include "segmob/segmentation.hpp"
#include "segmob/inference.hpp"
#include "segmob/stratify.hpp"
#include "segmob/entropy.hpp"
#include "segmob/stats.hpp"
#include "segmob/synth.hpp"
#include "segmob/pipeline.hpp"
