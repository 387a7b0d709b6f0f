# Copyright 2026 The Dynaquery Authors. All Rights Reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Count-guided dynamic-query detection: configs, training and metrics."""

import json as _json

from . import _core
from ._core import (
    DynaqueryError,
    count_to_level,
    derive_thresholds,
    giou,
    grad_check,
    hungarian,
    level_to_budget,
)

__all__ = [
    "DynaqueryError",
    "ablation_configs",
    "config_hash",
    "count_to_level",
    "default_config",
    "derive_thresholds",
    "evaluate",
    "evaluate_checkpoint",
    "generate",
    "giou",
    "grad_check",
    "hungarian",
    "level_to_budget",
    "normalize_config",
    "train",
]


def default_config():
    """The built-in experiment configuration as a dict."""
    return _json.loads(_core.default_config_json())


def normalize_config(config):
    """Fills defaults into a partial config and validates it."""
    return _json.loads(_core.normalize_config_json(_json.dumps(config)))


def config_hash(config):
    return _core.config_hash(_json.dumps(config))


def generate(spec, images):
    """Synthetic scenes as (image [3, H, W] array, [(class, x, y, w, h)])."""
    return _core.generate_json(_json.dumps(spec), images)


def evaluate(images, num_classes=1, max_detections=1500, scale_factor=0.5):
    """COCO-style AP, scale-bucket AP and LRP.

    `images` is a list of (ground_truth, detections) pairs with ground truth
    as (class, x, y, w, h) and detections as (class, x, y, w, h, score) in
    pixels.
    """
    return _json.loads(
        _core.evaluate_json(images, num_classes, max_detections, scale_factor))


def train(config, run_dir="", evaluate=True):
    """Two-stage training; returns the run record as a dict."""
    return _json.loads(_core.train_json(_json.dumps(config), run_dir, evaluate))


def evaluate_checkpoint(config, checkpoint, fixed_k=None):
    return _json.loads(
        _core.evaluate_checkpoint_json(_json.dumps(config), checkpoint, fixed_k))


def ablation_configs(config, axis):
    """(label, config) for every cell of an ablation axis."""
    return [(label, _json.loads(text))
            for label, text in _core.ablation_configs_json(
                _json.dumps(config), axis)]
