"""Desk-scale training runs on synthetic fleets. Slow: set LIGHTMOVE_SLOW=1 to run."""
import os
import unittest

from lightmove.baselines import BaselineData, fit_baseline, training_sequences
from lightmove.data import SplitSpec, prepare, synth_generate
from lightmove.evaluate import model_predictor, timed_evaluate
from lightmove.model import ModelConfig, apply_variant, count_params
from lightmove.train import TrainConfig, fit

SLOW = os.environ.get('LIGHTMOVE_SLOW') == '1'


def run_fleet(noise, seed=0):
    records = synth_generate(grid=(4, 4), cabs=5, noise=noise, steps=2000, seed=seed)
    bundle = prepare(records, SplitSpec())
    K = bundle.spec.session_len
    config = ModelConfig(num_locations=len(bundle.vocab.locations),
                         num_users=len(bundle.vocab.users), d_loc=24, d_time=8,
                         session_len=K)
    config = apply_variant(config, 'G2E').validate()
    train = bundle.examples('train', 1, config.num_time_slots, K, sliding=True)
    valid = bundle.examples('valid', 1, config.num_time_slots, K, sliding=True)
    test = bundle.examples('test', 1, config.num_time_slots, K, sliding=True)
    train_config = TrainConfig(epochs=100, seed=seed)
    ckpt = fit(train, valid, config, train_config)
    report = timed_evaluate(model_predictor(ckpt.to_store(config), config), test,
                            num_params=count_params(config))
    data = BaselineData(training_sequences(bundle.split('train'), bundle.vocab),
                        config.num_locations)
    baselines = {}
    for kind in ('frequency', 'markov1'):
        b = fit_baseline(kind, data)
        baselines[kind] = timed_evaluate(b.predict, test, name=kind)
    return report, baselines


@unittest.skipUnless(SLOW, 'set LIGHTMOVE_SLOW=1 for desk-scale training runs')
class TestAcceptance(unittest.TestCase):

    def test_memorizes_noise_free_fleet(self):
        report, _ = run_fleet(0.0)
        self.assertGreaterEqual(report.hits_at[1], 0.90)
        self.assertGreaterEqual(report.mrr, 0.93)

    def test_noisy_fleet_beats_count_models(self):
        report, baselines = run_fleet(0.2)
        self.assertGreater(report.mrr, baselines['frequency'].mrr)
        self.assertGreaterEqual(report.mrr, baselines['markov1'].mrr - 0.02)


if __name__ == '__main__':
    unittest.main()
