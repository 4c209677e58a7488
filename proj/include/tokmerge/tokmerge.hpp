#pragma once

#include "tokmerge/common.hpp"
#include "tokmerge/geometry.hpp"
#include "tokmerge/serialization.hpp"
#include "tokmerge/attention.hpp"
#include "tokmerge/energy.hpp"
#include "tokmerge/merge.hpp"
#include "tokmerge/alternatives.hpp"
#include "tokmerge/analysis.hpp"
#include "tokmerge/pipeline.hpp"
#include "tokmerge/report.hpp"
