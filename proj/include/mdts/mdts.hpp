#ifndef MDTS_MDTS_HPP
#define MDTS_MDTS_HPP

#include "mdts/analysis.hpp"
#include "mdts/checkpoint.hpp"
#include "mdts/config.hpp"
#include "mdts/corpus.hpp"
#include "mdts/finetune.hpp"
#include "mdts/losses.hpp"
#include "mdts/masking.hpp"
#include "mdts/model.hpp"
#include "mdts/tokeniser.hpp"
#include "mdts/training.hpp"

#endif  // MDTS_MDTS_HPP
