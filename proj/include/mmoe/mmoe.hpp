#pragma once

#include "mmoe/analyzer.hpp"
#include "mmoe/binary_io.hpp"
#include "mmoe/config.hpp"
#include "mmoe/data/clustering.hpp"
#include "mmoe/data/corpus.hpp"
#include "mmoe/data/interleaved.hpp"
#include "mmoe/data/packing.hpp"
#include "mmoe/data/similarity.hpp"
#include "mmoe/data/tokenizer.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/eval.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/nn.hpp"
#include "mmoe/ops.hpp"
#include "mmoe/params.hpp"
#include "mmoe/probe.hpp"
#include "mmoe/random.hpp"
#include "mmoe/tensor.hpp"
#include "mmoe/trainer.hpp"
#include "mmoe/vision.hpp"
