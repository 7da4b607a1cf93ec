"""
Training-based acceptance runs on the default configuration.
Slow: enabled with MTLAM_RUN_SLOW=1.
"""
import os

import numpy as np
import pytest

from config import load_experiment_config
from pipeline import (
    Trainer, ablate, build_model, context_consistency, evaluate, infer_visual_only, model_from_checkpoint
)
from toytask import ToyTask, bayes_oracle_report, generate, nearest_prototype_accuracy

DEFAULT_ENV = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs', 'default.env')
LEVEL_SUBSETS = [[], [1], [2], [3], [1, 2], [2, 3], [1, 2, 3]]
SINGLES = slice(1, 4)
PAIRS = slice(4, 6)


@pytest.fixture(scope='module')
def default_cfg():
    return load_experiment_config(DEFAULT_ENV)


@pytest.fixture(scope='module')
def default_splits(default_cfg):
    return generate(default_cfg.task, default_cfg.data.n_samples, default_cfg.data.split_seed,
                    default_cfg.data.val_fraction, default_cfg.data.test_fraction)


@pytest.fixture(scope='module')
def trained_best(default_cfg, default_splits):
    best, _ = Trainer(build_model(default_cfg.model)).train(default_splits[0], default_splits[1])
    return best


@pytest.mark.slow
class TestOracles:

    def test_monte_carlo_oracle_interval(self, default_cfg):
        task = ToyTask(default_cfg.task)
        split = task.make_split(10000, np.random.default_rng([default_cfg.task.seed, 99]), 'mc')
        report = bayes_oracle_report(default_cfg.task, split)
        assert report.n == 10000
        assert report.ci_high - report.ci_low < 0.03

    def test_context_beats_centre_window(self, default_cfg, default_splits):
        test = default_splits[2]
        full = bayes_oracle_report(default_cfg.task, test, context='full').accuracy
        centre = bayes_oracle_report(default_cfg.task, test, context='center').accuracy
        assert full > centre


@pytest.mark.slow
class TestTrainedModel:

    def test_accuracy_bracketed_by_baselines(self, default_cfg, default_splits, trained_best):
        test_set = default_splits[2]
        accuracy = evaluate(trained_best, test_set).acc_va
        oracle = bayes_oracle_report(default_cfg.task, test_set)
        assert nearest_prototype_accuracy(default_cfg.task, test_set, 'visual') < accuracy
        assert accuracy <= oracle.accuracy + 2 * oracle.stderr

    def test_level_two_addressing_follows_context(self, default_cfg, trained_best):
        model = model_from_checkpoint(trained_best)
        report = context_consistency(model, ToyTask(default_cfg.task), level=2, n_pairs=100, seed=0)
        assert report.n_pairs == 100
        assert report.difference > 0
        assert report.ci_low > 0

    def test_inference_ignores_audio_on_test_samples(self, default_splits, trained_best):
        model = model_from_checkpoint(trained_best)
        test_set = default_splits[2]
        rng = np.random.default_rng(1)
        calls = model.audio_calls
        for i in range(100):
            reference = None
            for audio in (None, test_set.audio[i], rng.standard_normal(test_set.audio[i].shape).astype(np.float32)):
                result = infer_visual_only(model, test_set.visual[i], audio=audio)
                if reference is None:
                    reference = result
                    continue
                np.testing.assert_array_equal(result.logits, reference.logits)
                for level, score in reference.scores.items():
                    np.testing.assert_array_equal(result.scores[level].scores.data, score.scores.data)
        assert model.audio_calls == calls


@pytest.mark.slow
class TestLevelAblation:

    def test_more_levels_help(self, default_cfg, default_splits):
        table = ablate(default_cfg, LEVEL_SUBSETS, default_splits, threads=int(os.environ.get('MTLAM_THREADS', 1)))
        assert len(table) == 7
        means = table['acc_mean'].tolist()
        baseline, best_single, best_pair, all_levels = means[0], max(means[SINGLES]), max(means[PAIRS]), means[6]
        assert baseline < best_single <= best_pair <= all_levels
        assert all_levels >= baseline + 2.0
