#pragma once

#include "i2v/adam.hpp"
#include "i2v/checkpoint.hpp"
#include "i2v/corpus.hpp"
#include "i2v/error.hpp"
#include "i2v/finetune.hpp"
#include "i2v/grad_check.hpp"
#include "i2v/graph.hpp"
#include "i2v/intrusion.hpp"
#include "i2v/metrics.hpp"
#include "i2v/model.hpp"
#include "i2v/ops.hpp"
#include "i2v/report.hpp"
#include "i2v/rng.hpp"
#include "i2v/synthetic.hpp"
#include "i2v/tensor.hpp"
#include "i2v/training.hpp"
