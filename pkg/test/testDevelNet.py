import unittest
import logging
import math
import os
import shutil
import tempfile
import numpy as np
from scripts.develNet.createZoo import *
from scripts.develNet.introspectZoo import *
from scripts.develNet.probeZoo import *
from scripts.develNet.reportRuns import *
from scripts.develNet.trainModel import *
from scripts.modules.augment import AugmentConfig, apply_permutation
from scripts.modules.errors import (BatchError, ConfigError, LayoutError,
                                    StorageError)
from scripts.modules.helperFunctions import setup_logger
from scripts.modules.hyperEncoder import EncoderConfig, HyperEncoder
from scripts.modules.json2csv import read_csv, records2csv
from scripts.modules.probes import ProbeReport
from scripts.modules.sslLosses import SSLConfig
from scripts.modules.zooStore import LayerLayout, WeightVector, ZooManifest

LOGGER = setup_logger('testDevelNet', None, logging.WARNING)


def tiny_encoder_config():
    return EncoderConfig(blocks=1, heads=1, token_dim=8, ffn_dim=16,
                         latent_dim=4, projection_dim=6, dropout=0.0)


def tiny_ssl_config(**kwargs):
    settings = {'mode': 'EcD', 'beta': 0.5, 'temperature': 0.5,
                'batch_size': 8, 'epochs': 2, 'lr': 1e-3, 'seed': 0}
    settings.update(kwargs)
    return SSLConfig(**settings)


class ZooTestCase(unittest.TestCase):
    """Shares one small tetris zoo between the driver tests."""
    @classmethod
    def setUpClass(cls):
        cls.dir_tmp = tempfile.mkdtemp()
        creator = ZooCreator(os.path.join(cls.dir_tmp, 'zoo'), models=10,
                             epochs=3, samples_per_class=20, lr=1e-2,
                             batch_size=16, logger=LOGGER)
        cls.manifest = creator.run()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir_tmp)


class testAssignSplits(unittest.TestCase):
    """Define and test interface for assign_splits."""
    def testSizes(self):
        """Test 70/15/15 sizes and seeded reproducibility."""
        splits = assign_splits(list(range(1, 21)), 3)
        counts = {s: list(splits.values()).count(s)
                  for s in ['train', 'val', 'test']}
        self.assertTrue(counts == {'train': 14, 'val': 3, 'test': 3},
                        "returned split sizes unexpectedly.")
        self.assertTrue(splits == assign_splits(list(range(1, 21)), 3),
                        "split assignment ignores the seed.")


class testZooCreator(ZooTestCase):
    """Define and test interface for ZooCreator."""
    def testBadArgs(self):
        """Test unknown kinds, tiny zoos and occupied directories."""
        with self.assertRaises(ConfigError, msg="accepted unknown kind."):
            ZooCreator(self.dir_tmp, kind='cifar', logger=LOGGER)
        with self.assertRaises(ConfigError, msg="accepted 5 models."):
            ZooCreator(self.dir_tmp, models=5, logger=LOGGER)
        creator = ZooCreator(self.manifest.root, models=10, logger=LOGGER)
        with self.assertRaises(StorageError, msg="wrote into a full dir."):
            creator.checkOutputDir()
        with self.assertRaises(ConfigError, msg="mnist zoo without files."):
            ZooCreator(self.dir_tmp, kind='mnist-seed',
                       logger=LOGGER).datasetInfo()

    def testManifest(self):
        """Test the manifest covers every model and reloads from disk."""
        models, crashed = self.manifest.models, self.manifest.crashed
        self.assertTrue(len(models) + len(crashed) == 10,
                        "lost models between training and manifest.")
        self.assertTrue(all(len(m['checkpoints']) == 3 for m in models),
                        "returned checkpoint count unexpectedly.")
        reloaded = ZooManifest.load(self.manifest.root)
        self.assertTrue(reloaded.split_sizes() == self.manifest.split_sizes()
                        and reloaded.layout == self.manifest.layout,
                        "reloaded manifest differs.")
        weights, rows = reloaded.samples('all')
        self.assertTrue(weights.shape == (3 * len(models), 100),
                        "returned zoo samples of unexpected shape.")
        self.assertTrue(set(r['epoch'] for r in rows) == {1, 2, 3},
                        "returned epochs unexpectedly.")

    def testConfigs(self):
        """Test seed zoos and hyper-parameter grids expand as documented."""
        creator = ZooCreator(self.dir_tmp, models=12, logger=LOGGER)
        configs = creator.buildConfigs()
        self.assertTrue([c.seed for c in configs] == list(range(1, 13))
                        and configs[0].lr == 3e-5,
                        "returned seed configs unexpectedly.")
        creator = ZooCreator(self.dir_tmp, kind='tetris-hyp', models=36,
                             logger=LOGGER)
        configs = creator.buildConfigs()
        self.assertTrue(len(configs) == 36 and
                        len(set((c.activation, c.init, c.lr)
                                for c in configs)) == 36,
                        "returned grid configs unexpectedly.")
        creator = ZooCreator(self.dir_tmp, kind='custom-grid', logger=LOGGER)
        with self.assertRaises(ConfigError, msg="accepted an empty grid."):
            creator.buildConfigs()


class testZooIntrospector(ZooTestCase):
    """Define and test interface for ZooIntrospector."""
    def testForward(self):
        """Test permuted checkpoints keep their logits."""
        introspector = ZooIntrospector(self.manifest, logger=LOGGER)
        report = introspector.verifyForward(samples=5, permutations=3,
                                            inputs=10)
        self.assertTrue(report['passed'] and report['checks'] == 15,
                        "forward check failed with deviation %.2e."
                        % report['max_deviation'])

    def testBackward(self):
        """Test a permuted init follows the permuted trajectory."""
        introspector = ZooIntrospector(self.manifest, logger=LOGGER)
        report = introspector.verifyBackward(epochs=2)
        self.assertTrue(len(report['epochs']) == 2,
                        "returned trajectory length unexpectedly.")
        for row in report['epochs']:
            self.assertTrue(row['ratio'] < TRAJECTORY_RATIO,
                            "trajectories diverged at epoch %i." % row['epoch'])

    def testTrajectoryDistances(self):
        """Test identical permuted runs give zero |Ap-B|."""
        layout = self.manifest.layout
        weights, rows = self.manifest.samples('train')
        run_a = [WeightVector(w, layout, epoch=r['epoch'])
                 for w, r in zip(weights[:3], rows[:3])]
        perms = {0: np.roll(np.arange(5), 1)}
        run_b = [apply_permutation(v, perms) for v in run_a]
        for row in trajectory_distances(run_a, run_b, perms):
            self.assertTrue(row['d_ap_b'] == 0.0 and row['d_a_b'] > 0,
                            "returned distances unexpectedly.")


class testHyperRepTrainer(ZooTestCase):
    """Define and test interface for HyperRepTrainer."""
    def setUp(self):
        self.dir_run = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir_run)

    def testRun(self):
        """Test history rows and saved artifacts."""
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(), dir_save=self.dir_run,
                                  logger=LOGGER)
        encoder, history = trainer.run()
        self.assertTrue([r['epoch'] for r in history] == [1, 2],
                        "returned history rows unexpectedly.")
        self.assertTrue(all(np.isfinite(r['loss']) and np.isfinite(r['val_r2'])
                            for r in history),
                        "history holds non-finite values.")
        for name in [FINAL_ENCODER, HISTORY_FILE, LAST_CHECKPOINT,
                     BEST_CHECKPOINT]:
            self.assertTrue(os.path.isfile(os.path.join(self.dir_run, name)),
                            "%s was not written." % name)
        self.assertTrue(read_csv(os.path.join(self.dir_run, HISTORY_FILE))
                        [0].keys() == set(HISTORY_COLUMNS),
                        "history.csv columns unexpected.")
        loaded, _, extra = HyperEncoder.load(
            os.path.join(self.dir_run, FINAL_ENCODER))
        self.assertTrue(np.array_equal(loaded.embed_batch(trainer.W_val),
                                       encoder.embed_batch(trainer.W_val)),
                        "saved encoder differs from the returned one.")
        self.assertTrue(extra['zoo'] == self.manifest.name,
                        "returned encoder header unexpectedly.")

    def testDeterministic(self):
        """Test equal seeds reproduce the loss history."""
        losses = []
        for _ in range(2):
            trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                      tiny_ssl_config(epochs=1),
                                      logger=LOGGER)
            losses.append([r['loss'] for r in trainer.run()[1]])
        self.assertTrue(losses[0] == losses[1],
                        "equal seeds gave different losses.")

    def testResume(self):
        """Test a resumed run continues after the last saved epoch."""
        HyperRepTrainer(self.manifest, tiny_encoder_config(),
                        tiny_ssl_config(), dir_save=self.dir_run,
                        logger=LOGGER).run()
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(epochs=3),
                                  dir_save=self.dir_run, logger=LOGGER)
        _, history = trainer.run(resume=True)
        self.assertTrue([r['epoch'] for r in history] == [1, 2, 3],
                        "resume did not continue the history.")
        self.assertTrue(trainer.state.step_count > 0,
                        "optimizer state was not restored.")

    def testModes(self):
        """Test reconstruction-free and augmentation-free objectives."""
        trainer = HyperRepTrainer(
            self.manifest, tiny_encoder_config(),
            tiny_ssl_config(mode='ED', epochs=1,
                            augment=AugmentConfig.disabled()), logger=LOGGER)
        inputs, targets = trainer.sampleViews(trainer.W_train[:4],
                                              np.arange(4), 1)
        self.assertTrue(np.array_equal(inputs, trainer.W_train[:4])
                        and np.array_equal(targets, inputs),
                        "ED without augmentation changed its inputs.")
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(mode='Ec', epochs=1),
                                  logger=LOGGER)
        inputs, _ = trainer.sampleViews(trainer.W_train[:4], np.arange(4), 1)
        self.assertTrue(inputs.shape == (8, 100),
                        "contrastive views were not stacked.")
        history = trainer.run()[1]
        self.assertTrue(math.isnan(history[0]['val_r2'])
                        and np.isfinite(history[0]['val_loss']),
                        "Ec reported a reconstruction metric.")

    def testBatches(self):
        """Test a trailing single sample joins the batch before it."""
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(), logger=LOGGER)
        self.assertTrue([len(b) for b in trainer.batches(np.arange(17))]
                        == [8, 9], "trailing sample was not folded.")
        trainer = HyperRepTrainer(
            self.manifest, tiny_encoder_config(),
            tiny_ssl_config(mode='ED', augment=AugmentConfig.disabled()),
            logger=LOGGER)
        self.assertTrue([len(b) for b in trainer.batches(np.arange(17))]
                        == [8, 8, 1], "ED batches changed unexpectedly.")

    def testBadBatches(self):
        """Test contrastive epochs without a 2-sample batch are refused."""
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(), logger=LOGGER)
        trainer.W_train = trainer.W_train[:1]
        with self.assertRaises(BatchError, msg="trained on one sample."):
            trainer.trainEpoch(1)
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(batch_size=1), logger=LOGGER)
        with self.assertRaises(BatchError, msg="trained with batch_size 1."):
            trainer.trainEpoch(1)

    def testSampleWeightedLoss(self):
        """Test the epoch loss weights each batch by its size."""
        trainer = HyperRepTrainer(
            self.manifest, tiny_encoder_config(),
            tiny_ssl_config(mode='ED', augment=AugmentConfig.disabled()),
            logger=LOGGER)
        trainer.W_train = trainer.W_train[:9]
        seen = []
        fit = trainer.lossParts

        def recording(inputs, targets, training, rng=None):
            parts = fit(inputs, targets, training, rng)
            seen.append((inputs.shape[0], parts[0].item()))
            return parts

        trainer.lossParts = recording
        loss = trainer.trainEpoch(1)[0]
        expected = sum(n * l for n, l in seen) / 9.0
        self.assertTrue([n for n, _ in seen] == [8, 1]
                        and abs(loss - expected) < 1e-9,
                        "epoch loss is not weighted by batch size.")

    def testReconstructionTargets(self):
        """Test contrastive views reconstruct their permutation-only form."""
        trainer = HyperRepTrainer(self.manifest, tiny_encoder_config(),
                                  tiny_ssl_config(), logger=LOGGER)
        weights = trainer.W_train[:4]
        inputs, targets = trainer.sampleViews(weights, np.arange(4), 1)
        self.assertTrue(targets.shape == (8, 100),
                        "targets were not stacked like the views.")
        for r in range(8):
            self.assertTrue(np.array_equal(np.sort(targets[r]),
                                           np.sort(weights[r % 4])),
                            "target %i is more than a permutation." % r)
        self.assertFalse(np.array_equal(inputs, targets),
                         "noise and erasure reached the targets.")


class testTrainingProgress(unittest.TestCase):
    """Define and test early ED training on a 20-model zoo."""
    @classmethod
    def setUpClass(cls):
        cls.dir_tmp = tempfile.mkdtemp()
        cls.manifest = ZooCreator(os.path.join(cls.dir_tmp, 'zoo'), models=20,
                                  epochs=5, samples_per_class=20, lr=1e-2,
                                  batch_size=16, logger=LOGGER).run()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir_tmp)

    def testTrainR2Increases(self):
        """Test train R2 strictly rises over 10 epochs for some seed."""
        curves = []
        for seed in range(3):
            trainer = HyperRepTrainer(
                self.manifest, tiny_encoder_config(),
                tiny_ssl_config(mode='ED', augment=AugmentConfig.disabled(),
                                batch_size=500, epochs=50, seed=seed),
                logger=LOGGER)
            curve = []
            for epoch in range(1, 11):
                trainer.trainEpoch(epoch)
                curve.append(reconstruction_r2(trainer.encoder,
                                               trainer.W_train))
            curves.append(curve)
        self.assertTrue(any(np.all(np.diff(c) > 0) for c in curves),
                        "train R2 never rose monotonically: %s" % curves)


class testZooProber(ZooTestCase):
    """Define and test interface for ZooProber and ood_transfer."""
    @classmethod
    def setUpClass(cls):
        super(testZooProber, cls).setUpClass()
        cls.encoder = HyperRepTrainer(
            cls.manifest, tiny_encoder_config(), tiny_ssl_config(epochs=1),
            logger=LOGGER).run()[0]

    def testRun(self):
        """Test one report row per cell and undefined cells as NaN."""
        prober = ZooProber(self.manifest, self.encoder, logger=LOGGER)
        sources = ['raw', 'sw', 'pca_linear', 'hyperrep']
        report = prober.run(sources, ['eph', 'acc', 'act'])
        self.assertTrue(len(report.rows) == 12
                        and report.sources() == sorted(sources),
                        "returned report rows unexpectedly.")
        self.assertTrue(math.isnan(report.value('raw', 'act')),
                        "single-activation zoo gave an act score.")
        self.assertTrue(np.isfinite(report.value('sw', 'eph')),
                        "epoch probe on sw is undefined.")
        self.assertTrue(prober.features['pca_linear']['train'].shape[1] == 4,
                        "PCA dim did not follow the latent dim.")

    def testBadArgs(self):
        """Test unknown sources, missing encoders and unknown tasks."""
        prober = ZooProber(self.manifest, logger=LOGGER)
        with self.assertRaises(ConfigError, msg="accepted unknown source."):
            prober.fitTransform('pixels')
        with self.assertRaises(ConfigError, msg="hyperrep without encoder."):
            prober.fitTransform('hyperrep')
        with self.assertRaises(ConfigError, msg="accepted unknown task."):
            prober.run(['raw'], ['depth'])

    def testOod(self):
        """Test transfer onto the same zoo and refusal of other layouts."""
        prober = ZooProber(self.manifest, self.encoder, logger=LOGGER)
        report = prober.run(['hyperrep'], ['eph', 'acc'])
        table = prober.ood_transfer(self.manifest, ['eph', 'acc'])
        for row, cell in zip(table, report.rows):
            self.assertTrue(abs(row['tau'] - cell['tau']) < 1e-12
                            or (math.isnan(row['tau'])
                                and math.isnan(cell['tau'])),
                            "self transfer changed %s tau from %s to %s."
                            % (row['task'], cell['tau'], row['tau']))
        n_test = len(self.manifest.samples('test')[1])
        self.assertTrue([r['task'] for r in table] == ['eph', 'acc']
                        and all(r['n'] == n_test for r in table),
                        "returned transfer table unexpectedly.")
        self.assertTrue(set(table[0]) == set(OOD_COLUMNS),
                        "transfer columns unexpected.")
        other = ZooManifest('other', 'custom-grid', {}, LayerLayout([
            {'kind': 'dense', 'weight_shape': [2, 3], 'bias': 2}]), {})
        with self.assertRaises(LayoutError, msg="transferred across layouts."):
            prober.ood_transfer(other, ['eph'])


class testRunReporter(unittest.TestCase):
    """Define and test interface for RunReporter."""
    def setUp(self):
        self.dir_tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir_tmp)

    def testEmpty(self):
        """Test an empty run list still writes a report."""
        path = RunReporter([], self.dir_tmp, logger=LOGGER).run()
        with open(path, 'r', encoding='utf-8') as file_in:
            body = file_in.read()
        self.assertTrue('No runs were given; nothing to report.' in body,
                        "empty report lacks its note.")

    def testSections(self):
        """Test histories, probes and NaN cells reach the report."""
        run = os.path.join(self.dir_tmp, 'run-a')
        os.makedirs(run)
        records2csv([{'epoch': 1, 'loss': 1.0, 'val_r2': 0.2},
                     {'epoch': 2, 'loss': 0.5, 'val_r2': 0.4}],
                    os.path.join(run, HISTORY_FILE))
        report = ProbeReport()
        report.add(source='raw', task='acc', metric='r2', value=0.7)
        report.add(source='sw', task='acc', metric='r2', value=float('nan'))
        records2csv(report.rows, os.path.join(run, PROBE_FILE),
                    ProbeReport.COLUMNS)
        out = os.path.join(self.dir_tmp, 'out')
        with open(RunReporter([run], out, logger=LOGGER).run(), 'r',
                  encoding='utf-8') as file_in:
            body = file_in.read()
        self.assertTrue('## Reconstruction' in body and '0.4000' in body,
                        "history section missing.")
        self.assertTrue('| acc | 0.7000 | n/a |' in body,
                        "probe table row unexpected.")
        self.assertTrue(NAN_NOTE in body, "NaN note missing.")
        self.assertTrue(os.path.isfile(os.path.join(out, CURVES_NAME)),
                        "validation curves were not plotted.")

    def testMarkdownTable(self):
        """Test header, separator and rows."""
        self.assertTrue(markdown_table(['a', 'b'], [[1, 2]])
                        == '| a | b |\n|---|---|\n| 1 | 2 |',
                        "returned table unexpectedly.")



DESK_SCALE = os.environ.get('HYPERZOO_DESK_SCALE') == '1'
DESK_EPOCHS = int(os.environ.get('HYPERZOO_DESK_EPOCHS', '300'))


def desk_encoder_config(latent_dim=20):
    return EncoderConfig(blocks=2, heads=2, token_dim=32, ffn_dim=64,
                         latent_dim=latent_dim, projection_dim=32,
                         dropout=0.1)


@unittest.skipUnless(DESK_SCALE, 'set HYPERZOO_DESK_SCALE=1 to run')
class testDeskScale(unittest.TestCase):
    """Define and test training outcomes on a 200-model tetris zoo."""
    @classmethod
    def setUpClass(cls):
        cls.dir_tmp = tempfile.mkdtemp()
        cls.jobs = os.cpu_count() or 1
        cls.seed_zoo = ZooCreator(os.path.join(cls.dir_tmp, 'seed'),
                                  models=200, epochs=25, jobs=cls.jobs,
                                  logger=LOGGER).run()

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.dir_tmp)

    def trainEncoder(self, mode='ED', latent_dim=20, augment=None):
        ssl = SSLConfig(mode=mode, beta=0.5, temperature=0.1, batch_size=100,
                        epochs=DESK_EPOCHS, lr=1e-3, seed=0,
                        augment=augment)
        return HyperRepTrainer(self.seed_zoo, desk_encoder_config(latent_dim),
                               ssl, logger=LOGGER, jobs=self.jobs).run()[0]

    def heldOutR2(self, encoder):
        return reconstruction_r2(encoder, self.seed_zoo.samples('test')[0])

    def testPermutationAugmentation(self):
        """Test permutation beats no augmentation by 5 R2 points."""
        plain = self.heldOutR2(self.trainEncoder(
            augment=AugmentConfig.disabled()))
        permuted = self.heldOutR2(self.trainEncoder(
            augment=AugmentConfig(erase=False, noise=False)))
        self.assertTrue(permuted - plain >= 0.05,
                        "permutation gave R2 %.3f against %.3f."
                        % (permuted, plain))

    def testCompressionTrend(self):
        """Test R2 does not rise as the compression ratio grows."""
        N = self.seed_zoo.layout.N
        scores = [self.heldOutR2(self.trainEncoder(latent_dim=N // c))
                  for c in [2, 3, 5]]
        self.assertTrue(all(a - b >= -0.01
                            for a, b in zip(scores, scores[1:])),
                        "R2 at c=2,3,5 is %s." % scores)

    def testHypTransfer(self):
        """Test seed-zoo regressors rank accuracy on a hyper-parameter zoo."""
        hyp_zoo = ZooCreator(os.path.join(self.dir_tmp, 'hyp'),
                             kind='tetris-hyp', models=200, epochs=25,
                             jobs=self.jobs, logger=LOGGER).run()
        prober = ZooProber(self.seed_zoo, self.trainEncoder(mode='EcD'),
                           logger=LOGGER)
        table = prober.ood_transfer(hyp_zoo, ['acc'])
        self.assertTrue(table[0]['tau'] > 0.2,
                        "accuracy transfer tau %.3f." % table[0]['tau'])


if __name__ == '__main__':
    unittest.main()
