#pragma once

#include "splab/bias.hpp"
#include "splab/corpus.hpp"
#include "splab/elicit.hpp"
#include "splab/grad.hpp"
#include "splab/io.hpp"
#include "splab/metrics.hpp"
#include "splab/model.hpp"
#include "splab/optim.hpp"
#include "splab/pretrain.hpp"
#include "splab/prompt.hpp"
#include "splab/report.hpp"
#include "splab/rng.hpp"
#include "splab/stopwords.hpp"
#include "splab/tasks.hpp"
#include "splab/vocab.hpp"
