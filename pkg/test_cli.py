import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest

from lightmove.checkpoint import read_checkpoint
from lightmove.cli import COMMANDS, RunManifest, main
from lightmove.data import read_bundle, read_logs

SMALL_MODEL = ['-v', 'G1E', '--d-loc', '4', '--d-time', '2', '--d-taxi', '2',
               '--time-slots', '4', '--dropout', '0', '-e', '2', '--lr', '0.02']


def quiet_main(argv):
    with contextlib.redirect_stdout(io.StringIO()) as out:
        code = main(argv)
    return code, out.getvalue()


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


class TestCli(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.dir = tempfile.mkdtemp()
        cls.logs = cls.path('fleet.tsv')
        cls.bundle = cls.path('bundle')
        cls.ckpt = cls.path('model.ckpt')
        assert main(['synth', '--grid', '4x4', '--cabs', '3', '--steps', '150', '-s', '1',
                     '-o', cls.logs]) == 0
        assert main(['prepare', '-i', cls.logs, '-o', cls.bundle, '-K', '4']) == 0
        assert main(['train', '-b', cls.bundle, '-o', cls.ckpt, '-s', '0'] + SMALL_MODEL) == 0

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir)

    @classmethod
    def path(cls, name):
        return os.path.join(cls.dir, name)

    def test_synth_is_deterministic(self):
        other = self.path('again.tsv')
        self.assertEqual(main(['synth', '--grid', '4x4', '--cabs', '3', '--steps', '150',
                               '-s', '1', '-o', other]), 0)
        self.assertEqual(read_bytes(other), read_bytes(self.logs))
        records, vocab = read_logs(self.logs)
        self.assertEqual(len(records), 3 * 150)
        self.assertEqual(vocab.user_ids(), ['cab000', 'cab001', 'cab002'])
        manifest = RunManifest.read(self.logs + '.run.json')
        self.assertEqual(manifest.command, 'synth')
        self.assertEqual(manifest.seed, 1)
        self.assertIn(self.logs, manifest.outputs)

    def test_usage_errors(self):
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(main(['synth', '-o', self.path('x.tsv')]), 2)
            self.assertEqual(main(['synth', '--grid', '1x1', '-o', self.path('x.tsv')]), 2)
            self.assertEqual(main([]), 2)

    def test_index_errors_are_handled(self):
        def out_of_range(args):
            raise IndexError('location index 99 out of range')
        saved = COMMANDS['synth']
        COMMANDS['synth'] = out_of_range
        try:
            self.assertEqual(main(['synth', '--grid', '4x4', '-o', self.path('x.tsv')]), 1)
        finally:
            COMMANDS['synth'] = saved

    def test_prepare(self):
        bundle = read_bundle(self.bundle)
        self.assertEqual(bundle.stats['num_users'], 3)
        self.assertEqual(bundle.spec.session_len, 4)
        manifest = RunManifest.read(os.path.join(self.bundle, 'run.json'))
        self.assertEqual(manifest.config['stats'], bundle.stats)
        self.assertIn(self.logs, manifest.inputs)

    def test_bad_variant(self):
        argv = ['train', '-b', self.bundle, '-o', self.path('bad.ckpt'), '-s', '0'] + SMALL_MODEL
        argv[argv.index('G1E')] = 'X9Z'
        self.assertEqual(main(argv), 1)
        self.assertFalse(os.path.exists(self.path('bad.ckpt')))

    def test_train_outputs(self):
        ckpt, config = read_checkpoint(self.ckpt)
        self.assertEqual((config.jump_kind, config.jumps, config.d), ('gru', 1, 6))
        self.assertIn(ckpt.epoch, (1, 2))
        with open(self.ckpt + '.log.tsv') as f:
            self.assertEqual(len(f.read().splitlines()), 3)
        manifest = RunManifest.read(self.ckpt + '.run.json')
        self.assertEqual(manifest.config['model']['d_loc'], 4)
        self.assertEqual(set(manifest.outputs), {self.ckpt, self.ckpt + '.log.tsv'})

    def test_eval_reproduces_validation(self):
        prefix = self.path('valid')
        code, _ = quiet_main(['eval', '-c', self.ckpt, '-b', self.bundle, '-o', prefix,
                              '--split', 'valid'])
        self.assertEqual(code, 0)
        with open(prefix + '.json') as f:
            reports = json.load(f)
        self.assertEqual(len(reports), 1)
        self.assertEqual(reports[0]['mrr'], reports[0]['extra']['recorded_valid_mrr'])

    def test_eval_with_baselines(self):
        prefix = self.path('test')
        code, out = quiet_main(['eval', '-c', self.ckpt, '-b', self.bundle, '-o', prefix,
                                '--baselines', 'frequency,markov1', '-t', '2'])
        self.assertEqual(code, 0)
        with open(prefix + '.json') as f:
            names = [r['name'] for r in json.load(f)]
        self.assertEqual(names, ['LightMove(G1E)', 'frequency', 'markov1'])
        with open(prefix + '.table.txt') as f:
            self.assertEqual(f.read(), out)
        self.assertEqual(len(out.splitlines()), 5)

    def test_tampered_checkpoint(self):
        bad = self.path('tampered.ckpt')
        data = bytearray(read_bytes(self.ckpt))
        data[-5] ^= 0xFF
        with open(bad, 'wb') as f:
            f.write(bytes(data))
        code, _ = quiet_main(['eval', '-c', bad, '-b', self.bundle, '-o', self.path('t')])
        self.assertEqual(code, 1)

    def test_other_bundle_is_rejected(self):
        other = self.path('other_bundle')
        self.assertEqual(main(['prepare', '-i', self.logs, '-o', other, '-K', '4',
                               '--ratios', '0.6,0.2,0.2']), 0)
        code, _ = quiet_main(['eval', '-c', self.ckpt, '-b', other, '-o', self.path('o')])
        self.assertEqual(code, 1)

    def test_manifest_replay(self):
        ckpt, log = read_bytes(self.ckpt), read_bytes(self.ckpt + '.log.tsv')
        self.assertEqual(main(['--manifest', self.ckpt + '.run.json']), 0)
        self.assertEqual(read_bytes(self.ckpt), ckpt)
        self.assertEqual(read_bytes(self.ckpt + '.log.tsv'), log)
        self.assertEqual(main(['--manifest', self.path('missing.json')]), 1)

    def test_predict(self):
        out = self.path('next.tsv')
        code, printed = quiet_main(['predict', '-c', self.ckpt, '-b', self.bundle, '-u', 'cab001',
                                    '-k', '3', '-o', out])
        self.assertEqual(code, 0)
        with open(out) as f:
            rows = [line.split('\t') for line in f.read().splitlines()]
        self.assertEqual(rows[0], ['step', 'rank', 'location_id', 'probability'])
        self.assertEqual([r[1] for r in rows[1:]], ['1', '2', '3'])
        probs = [float(r[3]) for r in rows[1:]]
        self.assertEqual(probs, sorted(probs, reverse=True))
        code, _ = quiet_main(['predict', '-c', self.ckpt, '-b', self.bundle, '-u', 'nobody',
                              '-o', out])
        self.assertEqual(code, 1)

    def test_sweep(self):
        out = self.path('sweep.tsv')
        self.assertEqual(main(['sweep', '-b', self.bundle, '-o', out, '-s', '0',
                               '--d-loc-grid', '4', '--d-time-grid', '2', '--d-taxi-grid', '2',
                               '--lr-grid', '0.01,0.02', '--time-slots', '4', '-e', '1',
                               '-v', 'G1E']), 0)
        with open(out) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[0].endswith('\tbest'))
        self.assertEqual(sorted(line.split('\t')[-1] for line in lines[1:]), ['0', '1'])


if __name__ == '__main__':
    unittest.main()
