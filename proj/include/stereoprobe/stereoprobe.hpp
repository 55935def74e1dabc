#pragma once

// Everything in one include.

#include "stereoprobe/common/error.hpp"
#include "stereoprobe/common/hash.hpp"
#include "stereoprobe/common/parallel.hpp"
#include "stereoprobe/common/rng.hpp"
#include "stereoprobe/common/text.hpp"
#include "stereoprobe/contrastive/ablation_study.hpp"
#include "stereoprobe/contrastive/layout.hpp"
#include "stereoprobe/contrastive/scoring.hpp"
#include "stereoprobe/dataset/probe_corpus.hpp"
#include "stereoprobe/dataset/sequences.hpp"
#include "stereoprobe/dataset/stereoset.hpp"
#include "stereoprobe/io/activation_cache.hpp"
#include "stereoprobe/io/archive.hpp"
#include "stereoprobe/io/run_config.hpp"
#include "stereoprobe/metrics/scorer.hpp"
#include "stereoprobe/metrics/stereoset_metrics.hpp"
#include "stereoprobe/model/ablation.hpp"
#include "stereoprobe/model/config.hpp"
#include "stereoprobe/model/ops.hpp"
#include "stereoprobe/model/tensor.hpp"
#include "stereoprobe/model/transformer.hpp"
#include "stereoprobe/model/weights.hpp"
#include "stereoprobe/pathway/residual.hpp"
#include "stereoprobe/pipeline/commands.hpp"
#include "stereoprobe/pipeline/workspace.hpp"
#include "stereoprobe/probe/features.hpp"
#include "stereoprobe/probe/mlp.hpp"
#include "stereoprobe/probe/trainer.hpp"
#include "stereoprobe/shapley/probe_game.hpp"
#include "stereoprobe/shapley/shapley.hpp"
#include "stereoprobe/tokenizer/bpe.hpp"
#include "stereoprobe/tokenizer/unicode.hpp"
