"""Shared fixtures: a small experiment configuration and the slow-test gate."""
import os

import pytest

from config import ExperimentConfig, nest_keys, parse_experiment_config

SMALL_ENV = {
    'OUTPUT_DIR': 'outputs',
    'SEEDS': '0,1',
    'TASK__VOCAB_SIZE': '6',
    'TASK__CONFUSION_GROUPS': '0,1;2,3',
    'TASK__WORDS_PER_CLIP': '3',
    'TASK__FRAMES_PER_WORD': '3',
    'TASK__FEATURE_DIM': '8',
    'TASK__VISUAL_NOISE': '0.5',
    'TASK__AUDIO_NOISE': '0.1',
    'TASK__BIGRAM_SHARPNESS': '2.0',
    'TASK__SEED': '0',
    'DATA__N_SAMPLES': '60',
    'DATA__SPLIT_SEED': '0',
    'DATA__VAL_FRACTION': '0.2',
    'DATA__TEST_FRACTION': '0.2',
    'MODEL__INPUT_DIM': '8',
    'MODEL__DIM': '8',
    'MODEL__NUM_CLASSES': '6',
    'MODEL__VISUAL__KERNEL_SIZES': '3',
    'MODEL__VISUAL__DILATIONS': '1,2,4',
    'MODEL__VISUAL__WIDTH': '8',
    'MODEL__AUDIO__KERNEL_SIZES': '3',
    'MODEL__AUDIO__DILATIONS': '1,2,4',
    'MODEL__AUDIO__WIDTH': '8',
    'MODEL__LEVELS': '1,2',
    'MODEL__MEMORY__HEADS': '2',
    'MODEL__MEMORY__SLOTS': '4',
    'MODEL__MEMORY__ALPHA': '4.0',
    'MODEL__EPOCHS': '2',
    'MODEL__BATCH_SIZE': '8',
    'MODEL__SEED': '0',
}


def write_env(path, mapping) -> str:
    with open(path, 'w') as f:
        for key, value in mapping.items():
            f.write(f"{key}={value}\n")
    return str(path)


def small_config(**overrides) -> ExperimentConfig:
    return parse_experiment_config(nest_keys({**SMALL_ENV, **overrides}))


@pytest.fixture
def small_cfg() -> ExperimentConfig:
    return small_config()


@pytest.fixture
def small_env_file(tmp_path) -> str:
    return write_env(tmp_path / 'small.env', SMALL_ENV)


def pytest_collection_modifyitems(config, items):
    if os.environ.get('MTLAM_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set MTLAM_RUN_SLOW=1 to run training-based acceptance tests")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
