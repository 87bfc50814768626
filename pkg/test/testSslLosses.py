import unittest
import numpy as np
from scripts.modules.sslLosses import *
from scripts.modules.augment import AugmentConfig
from scripts.modules.autodiff import Tensor, float64_mode, gradient_check, \
    l2_normalize
from scripts.modules.errors import BatchError, ConfigError, DataError, \
    DimensionError


class testSSLConfig(unittest.TestCase):
    """Define and test interface for SSLConfig."""
    def testBadArgs(self):
        """Test invalid objectives are refused."""
        for kwargs in [{'mode': 'VAE'}, {'mode': 'EcD', 'beta': 0.0},
                       {'mode': 'Ec+D', 'beta': 1.0},
                       {'temperature': 0.0}, {'epochs': 0},
                       {'batch_size': 0}, {'lr': 0.0},
                       {'mode': 'Ec', 'augment': AugmentConfig.disabled()}]:
            with self.assertRaises(
                    ConfigError, msg="SSLConfig accepted %s." % kwargs):
                SSLConfig(**kwargs)

    def testModes(self):
        """Test which parts each mode uses."""
        parts = {m: (SSLConfig(mode=m).reconstructs(),
                     SSLConfig(mode=m).contrastive()) for m in MODES}
        self.assertTrue(parts == {'ED': (True, False), 'Ec': (False, True),
                                  'EcD': (True, True), 'Ec+D': (True, True)},
                        "returned mode parts unexpectedly.")
        self.assertTrue(SSLConfig(mode='ED', beta=0.0,
                                  augment=AugmentConfig.disabled()).mode
                        == 'ED', "ED refused an unused beta.")

    def testRoundTrip(self):
        """Test from_dict restores augmentation settings."""
        cfg = SSLConfig(mode='Ec+D', beta=0.3,
                        augment=AugmentConfig(noise_std=0.2))
        again = SSLConfig.from_dict(cfg.as_dict())
        self.assertTrue(again.as_dict() == cfg.as_dict(),
                        "returned config unexpectedly.")


class testNtXent(unittest.TestCase):
    """Define and test interface for ntxent_loss."""
    def testIdentical(self):
        """Test identical embeddings give log(2M - 1)."""
        z = np.tile([[1.0, 0.0]], (2, 1))
        loss = ntxent_loss(Tensor(z), Tensor(z), 1.0).item()
        self.assertTrue(abs(loss - np.log(3.0)) < 1e-5,
                        "returned %.5f instead of log 3." % loss)

    def testOrthogonal(self):
        """Test two orthogonal samples with matching views."""
        z = np.eye(2)
        loss = ntxent_loss(Tensor(z), Tensor(z), 1.0).item()
        expected = -np.log(np.e / (np.e + 2.0))
        self.assertTrue(abs(loss - expected) < 1e-5,
                        "returned %.5f instead of %.5f." % (loss, expected))
        self.assertTrue(abs(expected - 0.5514) < 1e-4,
                        "hand-computed reference drifted.")

    def testTemperature(self):
        """Test a lower temperature sharpens matching views."""
        z = np.eye(2)
        hot = ntxent_loss(Tensor(z), Tensor(z), 1.0).item()
        cold = ntxent_loss(Tensor(z), Tensor(z), 0.1).item()
        self.assertTrue(cold < hot, "lower temperature did not lower loss.")

    def testBadArgs(self):
        """Test one-sample batches and mismatched views are refused."""
        with self.assertRaises(BatchError, msg="accepted a single sample."):
            ntxent_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), 0.1)
        with self.assertRaises(DimensionError, msg="accepted view mismatch."):
            ntxent_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), 0.1)

    def testGradient(self):
        """Test gradients through normalization and the masked softmax."""
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        with float64_mode():
            ta, tb = Tensor(a), Tensor(b)
            err = gradient_check(
                lambda: ntxent_loss(l2_normalize(ta), l2_normalize(tb), 0.5),
                [ta, tb], eps=1e-6)
        self.assertTrue(err < 1e-6, "gradient error %.2e." % err)


class testPositiveContrast(unittest.TestCase):
    """Define and test interface for positive_contrast_loss."""
    def testValues(self):
        """Test aligned, orthogonal and temperature-shifted cases."""
        z = np.eye(2)
        aligned = positive_contrast_loss(Tensor(z), Tensor(z), 1.0).item()
        orthogonal = positive_contrast_loss(Tensor(z), Tensor(z[::-1]),
                                            1.0).item()
        shifted = positive_contrast_loss(Tensor(z), Tensor(z), np.e).item()
        self.assertTrue(abs(aligned + 1.0) < 1e-6,
                        "aligned views did not give -1.")
        self.assertTrue(abs(orthogonal) < 1e-6,
                        "orthogonal views did not give 0.")
        self.assertTrue(abs(shifted) < 1e-6,
                        "log T offset did not apply.")


class testCombinedLoss(unittest.TestCase):
    """Define and test interface for mse_loss and combined_loss."""
    def testMse(self):
        """Test per-sample squared error summed, then averaged."""
        v = Tensor(np.zeros((2, 3)))
        v_hat = Tensor(np.array([[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]]))
        self.assertTrue(abs(mse_loss(v, v_hat).item() - 3.0) < 1e-6,
                        "returned mse unexpectedly.")
        with self.assertRaises(DimensionError, msg="accepted shape mismatch."):
            mse_loss(v, Tensor(np.zeros((2, 2))))

    def testMix(self):
        """Test every mode mixes its parts as documented."""
        mse, contrast = Tensor(np.array(1.0)), Tensor(np.array(2.0))
        self.assertTrue(combined_loss('ED', 0.5, mse).item() == 1.0,
                        "ED did not return the reconstruction term.")
        self.assertTrue(combined_loss('Ec', 0.5, None, contrast).item() == 2.0,
                        "Ec did not return the contrastive term.")
        self.assertTrue(
            abs(combined_loss('EcD', 0.5, mse, contrast).item() - 1.5) < 1e-6,
            "EcD did not mix with beta.")
        self.assertTrue(
            abs(combined_loss('Ec+D', 0.25, mse, contrast).item() - 1.75)
            < 1e-6, "Ec+D did not mix with beta.")

    def testBadArgs(self):
        """Test missing parts and unknown modes are refused."""
        with self.assertRaises(ConfigError, msg="EcD ran without contrast."):
            combined_loss('EcD', 0.5, Tensor(np.array(1.0)))
        with self.assertRaises(ConfigError, msg="Ec+D ran without mse."):
            combined_loss('Ec+D', 0.5, None, Tensor(np.array(1.0)))
        with self.assertRaises(ConfigError, msg="accepted unknown mode."):
            combined_loss('VAE', 0.5, Tensor(np.array(1.0)))


class testPooledR2(unittest.TestCase):
    """Define and test interface for pooled_r2."""
    def setUp(self):
        self.weights = np.random.default_rng(0).normal(size=(10, 6))

    def testValues(self):
        """Test perfect and mean reconstructions."""
        self.assertTrue(pooled_r2(self.weights, self.weights) == 1.0,
                        "perfect reconstruction is not 1.")
        mean = np.tile(self.weights.mean(axis=0), (10, 1))
        self.assertTrue(abs(pooled_r2(self.weights, mean)) < 1e-12,
                        "mean reconstruction is not 0.")

    def testUndefined(self):
        """Test empty splits raise and constant splits give NaN."""
        with self.assertRaises(DataError, msg="accepted an empty split."):
            pooled_r2(self.weights[:0], self.weights[:0])
        constant = np.ones((4, 6))
        self.assertTrue(np.isnan(pooled_r2(constant, constant)),
                        "constant split did not give NaN.")


if __name__ == '__main__':
    unittest.main()
