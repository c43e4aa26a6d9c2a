#ifndef SHORTLVLM_SHORTLVLM_HPP
#define SHORTLVLM_SHORTLVLM_HPP

#include "shortlvlm/archive.hpp"
#include "shortlvlm/calibration.hpp"
#include "shortlvlm/error.hpp"
#include "shortlvlm/eval_harness.hpp"
#include "shortlvlm/hash.hpp"
#include "shortlvlm/layer_localizer.hpp"
#include "shortlvlm/linalg.hpp"
#include "shortlvlm/model.hpp"
#include "shortlvlm/parallel.hpp"
#include "shortlvlm/random.hpp"
#include "shortlvlm/scp.hpp"
#include "shortlvlm/token_importance.hpp"
#include "shortlvlm/train.hpp"

#endif  // SHORTLVLM_SHORTLVLM_HPP
