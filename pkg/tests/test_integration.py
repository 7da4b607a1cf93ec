"""
Integration tests for the command-line pipeline.
Runs gen -> train -> eval -> diagnostics end to end on the small configuration.
"""
import logging
import os

import pandas as pd
import pytest

import main
from checkpoint import load_checkpoint
from tests.conftest import SMALL_ENV, write_env


def drop_pipeline_handlers():
    root = logging.getLogger()
    for handler in [h for h in root.handlers if getattr(h, '_mtlam', False)]:
        root.removeHandler(handler)
        handler.close()


@pytest.fixture(autouse=True)
def quiet_logging(monkeypatch):
    monkeypatch.setenv('MTLAM_LOG_FILE', '')
    monkeypatch.setenv('MTLAM_THREADS', '1')
    yield
    drop_pipeline_handlers()


@pytest.fixture(scope='class')
def workspace(tmp_path_factory):
    """Generated data and one trained model shared by the tests of a class."""
    root = tmp_path_factory.mktemp('cli')
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv('MTLAM_LOG_FILE', '')
        config = write_env(root / 'small.env', {**SMALL_ENV, 'OUTPUT_DIR': str(root / 'outputs')})
        data = str(root / 'data')
        run = str(root / 'run')
        assert main.main(['gen', '--config', config, '--out', data]) == main.EXIT_OK
        assert main.main(['train', '--config', config, '--data', data, '--out', run]) == main.EXIT_OK
    drop_pipeline_handlers()
    return {'root': root, 'config': config, 'data': data, 'run': run}


class TestEndToEnd:

    def test_gen_outputs(self, workspace):
        files = sorted(os.listdir(workspace['data']))
        assert files == ['dataset.json', 'test.mtlt', 'train.mtlt', 'val.mtlt']

    def test_gen_prints_oracles(self, workspace, capsys):
        out_dir = str(workspace['root'] / 'data2')
        assert main.main(['gen', '--config', workspace['config'], '--out', out_dir]) == main.EXIT_OK
        output = capsys.readouterr().out
        assert 'train: 36 samples' in output
        assert 'Bayes oracle (visual, test)' in output
        assert 'Nearest prototype (audio, test)' in output

    def test_gen_is_deterministic(self, workspace):
        out_dir = str(workspace['root'] / 'data3')
        main.main(['gen', '--config', workspace['config'], '--out', out_dir])
        for split in ('train', 'val', 'test'):
            with open(os.path.join(workspace['data'], f'{split}.mtlt'), 'rb') as a, \
                    open(os.path.join(out_dir, f'{split}.mtlt'), 'rb') as b:
                assert a.read() == b.read()

    def test_train_outputs(self, workspace):
        files = set(os.listdir(workspace['run']))
        assert {'best.mtlc', 'best.mtlc.json', 'last.mtlc', 'last.mtlc.json', 'steps.csv', 'epochs.csv'} <= files
        epochs = pd.read_csv(os.path.join(workspace['run'], 'epochs.csv'))
        assert list(epochs.columns) == ['epoch', 'acc_v', 'acc_a', 'acc_va']
        assert len(epochs) == 2

    def test_eval_writes_csv(self, workspace, capsys):
        out_path = str(workspace['root'] / 'eval.csv')
        code = main.main(['eval', '--checkpoint', os.path.join(workspace['run'], 'best.mtlc'),
                          '--data', workspace['data'], '--split', 'test', '--out', out_path])
        assert code == main.EXIT_OK
        row = pd.read_csv(out_path).iloc[0]
        assert row['split'] == 'test' and row['n'] == 12
        assert 'acc_va=' in capsys.readouterr().out

    def test_dump_addressing(self, workspace):
        out_path = str(workspace['root'] / 'scores.csv')
        code = main.main(['dump-addressing', '--checkpoint', os.path.join(workspace['run'], 'best.mtlc'),
                          '--data', workspace['data'], '--level', '2', '--sample', '3', '--out', out_path])
        assert code == main.EXIT_OK
        df = pd.read_csv(out_path)
        assert list(df.columns) == ['t', 'head', 'slot', 'score']
        assert len(df) == 9 * 2 * 4

    def test_context_check(self, workspace, capsys):
        code = main.main(['context-check', '--checkpoint', os.path.join(workspace['run'], 'best.mtlc'),
                          '--config', workspace['config'], '--level', '1', '--pairs', '5'])
        assert code == main.EXIT_OK
        assert 'Level 1: matched' in capsys.readouterr().out

    def test_gradcheck(self, workspace, capsys):
        code = main.main(['gradcheck', '--config', workspace['config'], '--n-params', '5'])
        assert code == main.EXIT_OK
        assert 'PASSED' in capsys.readouterr().out

    def test_resume_with_other_config_rejected(self, workspace):
        config = write_env(workspace['root'] / 'longer.env',
                           {**SMALL_ENV, 'OUTPUT_DIR': str(workspace['root'] / 'outputs'), 'MODEL__EPOCHS': '3'})
        code = main.main(['train', '--config', config, '--data', workspace['data'],
                          '--out', str(workspace['root'] / 'resumed'),
                          '--resume', os.path.join(workspace['run'], 'last.mtlc')])
        assert code == main.EXIT_ERROR

    def test_resume_finished_run(self, workspace):
        code = main.main(['train', '--config', workspace['config'], '--data', workspace['data'],
                          '--out', workspace['run'], '--resume', os.path.join(workspace['run'], 'last.mtlc')])
        assert code == main.EXIT_OK
        assert len(pd.read_csv(os.path.join(workspace['run'], 'steps.csv'))) == 2 * 5

    def test_baseline_levels_override(self, workspace):
        run = str(workspace['root'] / 'baseline')
        code = main.main(['train', '--config', workspace['config'], '--data', workspace['data'], '--out', run,
                          '--levels', ''])
        assert code == main.EXIT_OK
        assert load_checkpoint(os.path.join(run, 'best.mtlc')).config.levels == []


class TestAblationCommand:

    def test_table(self, workspace, capsys):
        out_path = str(workspace['root'] / 'ablation.csv')
        code = main.main(['ablate', '--config', workspace['config'], '--data', workspace['data'],
                          '--subsets', 'none;1;2;1,2', '--out', out_path])
        assert code == main.EXIT_OK
        table = pd.read_csv(out_path)
        assert list(table.columns) == ['baseline', 'mtlam_1', 'mtlam_2', 'acc_mean', 'acc_std', 'n_seeds']
        assert len(table) == 4
        assert table['n_seeds'].tolist() == [2, 2, 2, 2]
        assert table['acc_mean'].between(0, 100).all()
        assert 'Ablation table written' in capsys.readouterr().out
