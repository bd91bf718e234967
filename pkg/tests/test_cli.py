"""Tests for the command-line entry point.
"""
import json

import pytest
from rego.cli import _pair, build_parser, build_train_config, load_config_file, main
from rego.data import generate_dataset, save_dataset
from rego.evaluate import EvalReport
from rego.model import Detector, save_checkpoint
from rego.train import EpochRecord, RunRecord
from tests.conftest import tiny_config

TINY_FLAGS = ['--width', '16', '--heads', '2', '--encoder-layers', '1', '--num-queries', '6',
              '--ffn-width', '32', '--backbone-widths', '8,8,8,8', '--stem-width', '4',
              '--roi-window', '3', '--glimpse-layers', '1']


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _fake_record(ap=0.25):
    return RunRecord({}, [EpochRecord(0, 1.5, [1.5], [EvalReport(AP=ap, stage=0)])])


@pytest.fixture
def checkpoint(tmp_path):
    """A freshly initialized one-stage checkpoint and a saved validation split.
    """
    rundir = tmp_path / 'run'
    save_checkpoint(Detector(tiny_config(1)), rundir)
    datadir = tmp_path / 'data'
    save_dataset(generate_dataset(2, seed=3), datadir, 'val')
    return rundir, datadir


class TestConfigFile:
    """Tests for key = value config files.
    """

    def test_parse(self, tmp_path):
        """Verify comments, blank lines and dashed keys are handled.
        """
        path = tmp_path / 'run.cfg'
        path.write_text('# sweep\nepochs = 3\n\nn-stages = 2  # two stages\nalpha = 2, 1\n')
        assert load_config_file(path) == {'epochs': '3', 'n_stages': '2', 'alpha': '2, 1'}

    @pytest.mark.parametrize(('text', 'message'), [('colour = red\n', 'unknown key'),
                                                   ('epochs 3\n', 'key = value')])
    def test_errors(self, tmp_path, text, message):
        """Verify unknown keys and malformed lines name the line.
        """
        path = tmp_path / 'bad.cfg'
        path.write_text(text)
        with pytest.raises(ValueError, match=message):
            load_config_file(path)

    def test_build(self):
        """Verify flat values land in the train, model, glimpse and cost sections.
        """
        cfg = build_train_config({'epochs': '3', 'seed': '7', 'image_size': '32x64',
                                  'n_stages': '2', 'alpha': '2,1', 'cost_l1': '4',
                                  'loss': 'focal', 'level': 'none'})
        assert cfg.epochs == 3
        assert cfg.image_size == (32, 64)
        assert cfg.model.seed == 7
        assert cfg.model.loss == 'focal'
        assert cfg.model.glimpse.alpha == [2.0, 1.0]
        assert cfg.model.glimpse.level is None
        assert cfg.cost.l1 == 4.0

    @pytest.mark.parametrize(('text', 'expected'), [('64', (64, 64)), ('32x96', (32, 96)),
                                                    ('32,96', (32, 96))])
    def test_pair(self, text, expected):
        """Verify image sizes accept one or two extents.
        """
        assert _pair(text) == expected


class TestMain:
    """Tests for verbs run through main().
    """

    def test_flops(self, capsys):
        """Verify the full-scale glimpse overhead is reported.
        """
        code = main(['flops', '--width', '256', '--heads', '8', '--num-queries', '300',
                     '--num-classes', '91', '--ffn-width', '2048', '--image-size', '800x1333'])
        out = _stdout_json(capsys)
        assert code == 0
        assert out['rego_overhead'] == pytest.approx(13.2e9, rel=0.05)
        assert out['total'] == sum(out['modules'].values())

    def test_flags_override_file(self, tmp_path, capsys):
        """Verify a flag wins over the same key in the config file.
        """
        path = tmp_path / 'run.cfg'
        path.write_text('n_stages = 0\n')
        main(['flops', '--config', str(path)] + TINY_FLAGS)
        assert _stdout_json(capsys)['rego_overhead'] == 0
        main(['flops', '--config', str(path), '--n-stages', '2'] + TINY_FLAGS)
        assert _stdout_json(capsys)['rego_overhead'] > 0

    def test_error_json(self, capsys):
        """Verify a failing verb exits 1 with a JSON error line on stderr.
        """
        code = main(['flops', '--n-stages', '2', '--alpha', '1,2'])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 1
        assert err['error'] == 'ValueError'
        assert 'decrease' in err['message']

    def test_unknown_verb(self):
        """Verify argparse rejects unknown verbs with exit code 2.
        """
        with pytest.raises(SystemExit) as exc:
            main(['nope'])
        assert exc.value.code == 2

    def test_disentangled_flag(self):
        """Verify the boolean flag needs no value.
        """
        args = build_parser().parse_args(['ablate', '--axis', 'scale', '--disentangled'])
        assert args.disentangled is True

    def test_train(self, mocker, capsys, tmp_path, clean_settings):
        """Verify train receives the parsed config and its summary is printed.
        """
        fake = mocker.patch('rego.cli.train', return_value=(_fake_record(), None))
        code = main(['--log-level', 'warning', 'train', '--epochs', '4', '--rundir',
                     str(tmp_path), '--n-stages', '1'])
        cfg = fake.call_args.args[0]
        assert code == 0
        assert clean_settings['log_level'] == 'WARNING'
        assert cfg.epochs == 4
        assert cfg.rundir == str(tmp_path)
        assert cfg.model.glimpse.alpha == [1.0]
        out = _stdout_json(capsys)
        assert out['epochs'] == 1
        assert out['AP'] == 0.25

    def test_gen_data(self, tmp_path, capsys):
        """Verify both splits are rendered under the data directory.
        """
        code = main(['gen-data', '--datadir', str(tmp_path), '--n-train', '2', '--n-val', '1'])
        assert code == 0
        assert _stdout_json(capsys) == {'datadir': str(tmp_path), 'train': 2, 'val': 1}
        assert (tmp_path / 'train' / '00001.bin').exists()
        assert (tmp_path / 'val' / 'annotations.json').exists()

    def test_curves(self, tmp_path, capsys):
        """Verify labeled and unlabeled record paths become curve series.
        """
        for name, ap in (('a', 0.1), ('b', 0.2)):
            (tmp_path / name).mkdir()
            (tmp_path / name / 'record.json').write_text(json.dumps(_fake_record(ap).to_dict()))
        code = main(['curves', f'detr={tmp_path / "a" / "record.json"}',
                     str(tmp_path / 'b' / 'record.json'), '--out', str(tmp_path)])
        assert code == 0
        series = json.loads((tmp_path / 'curves.json').read_text())
        assert sorted(series) == ['b', 'detr']
        assert series['b']['AP'] == [0.2]

    def test_curves_missing_record(self, tmp_path, capsys):
        """Verify a missing record file is reported as LookupError.
        """
        assert main(['curves', str(tmp_path / 'none.json')]) == 1
        assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])['error'] == 'LookupError'

    def test_eval(self, checkpoint, capsys):
        """Verify one report per stage, or only stage 0 with --no-rego.
        """
        rundir, datadir = checkpoint
        assert main(['eval', '--checkpoint', str(rundir), '--datadir', str(datadir)]) == 0
        assert [r['stage'] for r in _stdout_json(capsys)] == [0, 1]
        main(['eval', '--checkpoint', str(rundir), '--datadir', str(datadir), '--no-rego'])
        assert [r['stage'] for r in _stdout_json(capsys)] == [0]

    def test_relations(self, checkpoint, capsys):
        """Verify relations.json is a flat list of [query, source, weight] triples.
        """
        rundir, datadir = checkpoint
        code = main(['relations', '--checkpoint', str(rundir), '--datadir', str(datadir),
                     '--top-k', '2', '--image', '1'])
        assert code == 0
        out = _stdout_json(capsys)
        assert out['stage'] == 1
        assert out['image'] == 1
        triples = json.loads((rundir / 'relations.json').read_text())
        assert len(triples) == 6 * 2
        assert all(len(t) == 3 for t in triples)
        assert [t[0] for t in triples] == [i for i in range(6) for _ in range(2)]
        assert all(0 <= t[1] < 6 and 0 <= t[2] <= 1 for t in triples)
        for i in range(6):
            weights = [t[2] for t in triples if t[0] == i]
            assert weights == sorted(weights, reverse=True)

    def test_eval_manifest_mismatch(self, checkpoint, capsys):
        """Verify model options that contradict the checkpoint are rejected.
        """
        rundir, datadir = checkpoint
        code = main(['eval', '--checkpoint', str(rundir), '--datadir', str(datadir),
                     '--n-stages', '2'])
        err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert code == 1
        assert err['error'] == 'ManifestError'
        assert 'n_stages' in err['message']

    def test_eval_matching_options(self, checkpoint, capsys):
        """Verify options that agree with the checkpoint are accepted.
        """
        rundir, datadir = checkpoint
        code = main(['eval', '--checkpoint', str(rundir), '--datadir', str(datadir),
                     '--n-stages', '1', '--width', '16', '--backbone-widths', '8,8,8,8'])
        assert code == 0
        assert len(_stdout_json(capsys)) == 2

    def test_relations_bad_image(self, checkpoint, capsys):
        """Verify an image index outside the split fails cleanly.
        """
        rundir, datadir = checkpoint
        assert main(['relations', '--checkpoint', str(rundir), '--datadir', str(datadir),
                     '--image', '5']) == 1

    def test_histogram(self, checkpoint, capsys):
        """Verify one row of bin counts per stage is written.
        """
        rundir, datadir = checkpoint
        code = main(['histogram', '--checkpoint', str(rundir), '--datadir', str(datadir),
                     '--bins', '0.5,0.75,1.0'])
        assert code == 0
        payload = json.loads((rundir / 'histogram.json').read_text())
        assert payload['bins'] == [0.5, 0.75, 1.0]
        assert len(payload['counts']) == 2
        assert all(len(row) == 2 for row in payload['counts'])
