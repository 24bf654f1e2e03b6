// Copyright 2026 The cpnslab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small streams, models and configs shared by the tests.

#pragma once

#include "cpns/model.hpp"
#include "cpns/task_data.hpp"
#include "cpns/trainer.hpp"

#include <cstdint>

namespace cpns::testing {

inline SyntheticScmConfig tiny_scm(std::uint64_t seed, std::size_t tasks = 2) {
    SyntheticScmConfig c;
    c.classes_per_task = 3;
    c.num_tasks = tasks;
    c.d_c = 2;
    c.d_s = 4;
    c.input_dim = 24;
    c.train_per_class = 20;
    c.test_per_class = 20;
    c.seed = seed;
    return c;
}

inline ModelConfig tiny_model(std::size_t input_dim) {
    ModelConfig c;
    c.input_dim = input_dim;
    c.hidden = {12};
    c.feature_dim = 8;
    return c;
}

inline TrainConfig fast_train() {
    TrainConfig c;
    c.stage1_epochs = 2;
    c.stage2_epochs = 3;
    c.batch_size = 16;
    c.buffer_capacity = 30;
    c.report_samples = 16;
    return c;
}

} // namespace cpns::testing
