import unittest
import numpy as np
from scripts.modules.autodiff import *
from scripts.modules.attention import (attention_block, init_attention_block,
                                       named_parameters)
from scripts.modules.errors import ConfigError, DimensionError, StateError
from scripts.modules.optimizers import (OptimizerState, optimizer_step,
                                        zero_grads)

GRAD_TOL = 1e-6
LINEAR_TOL = 1e-5
GENERAL_TOL = 1e-3
GRAD_INSTANCES = 20


def scalar_of(out, seed=0):
    """Project a tensor onto a fixed random direction."""
    proj = np.random.default_rng(seed).normal(size=out.shape)
    return tsum(out * Tensor(proj))


class testGradients(unittest.TestCase):
    """Define and test backward() against central finite differences."""
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def check(self, fn, arrays, msg):
        with float64_mode():
            tensors = [Tensor(a) for a in arrays]
            err = gradient_check(lambda: fn(*tensors), tensors, eps=1e-6)
        self.assertTrue(err < GRAD_TOL, "%s gradient error %.2e." % (msg, err))

    def testElementwise(self):
        """Test add, sub, mul, div, pow, exp and log."""
        a = self.rng.normal(size=(3, 4))
        b = self.rng.uniform(0.5, 2.0, size=(3, 4))
        self.check(lambda x, y: scalar_of(x + y * x - y), [a, b], "add/mul")
        self.check(lambda x, y: scalar_of(x / y), [a, b], "div")
        self.check(lambda x: scalar_of(power(x, 3)), [a], "pow")
        self.check(lambda x: scalar_of(exp(x)), [a], "exp")
        self.check(lambda y: scalar_of(log(y)), [b], "log")

    def testBroadcast(self):
        """Test gradients of a broadcast bias are summed."""
        a = self.rng.normal(size=(5, 3))
        b = self.rng.normal(size=(3,))
        self.check(lambda x, y: scalar_of(x + y), [a, b], "broadcast add")

    def testReductionsAndShapes(self):
        """Test sum, mean, reshape, transpose, getitem and concat."""
        a = self.rng.normal(size=(2, 3, 4))
        self.check(lambda x: scalar_of(tsum(x, axis=1)), [a], "sum")
        self.check(lambda x: scalar_of(mean(x, axis=-1, keepdims=True)), [a],
                   "mean")
        self.check(lambda x: scalar_of(reshape(x, (6, 4))), [a], "reshape")
        self.check(lambda x: scalar_of(transpose(x, (2, 0, 1))), [a],
                   "transpose")
        self.check(lambda x: scalar_of(getitem(x, (slice(0, 1), 2))), [a],
                   "getitem")
        self.check(lambda x: scalar_of(concat([x, x * 2.0], axis=1)), [a],
                   "concat")

    def testMatmul(self):
        """Test batched matmul gradients."""
        a = self.rng.normal(size=(2, 3, 4))
        b = self.rng.normal(size=(4, 5))
        self.check(lambda x, y: scalar_of(matmul(x, y)), [a, b], "matmul")

    def testConv2d(self):
        """Test conv2d with bias for single and batched input."""
        x = self.rng.normal(size=(2, 3, 6, 5))
        k = self.rng.normal(size=(4, 3, 3, 2))
        b = self.rng.normal(size=(4,))
        self.check(lambda x_, k_, b_: scalar_of(conv2d(x_, k_, b_)), [x, k, b],
                   "conv2d")
        self.check(lambda x_, k_: scalar_of(conv2d(x_, k_)), [x[0], k],
                   "conv2d single")

    def testMaxpool(self):
        """Test maxpool2d with distinct inputs so argmax is stable."""
        x = self.rng.permutation(2 * 2 * 5 * 4).reshape(2, 2, 5, 4) * 0.01
        self.check(lambda x_: scalar_of(maxpool2d(x_, 2)), [x], "maxpool")

    def testActivations(self):
        """Test every activation kind."""
        a = self.rng.normal(size=(4, 3))
        a = a + np.sign(a) * 0.1  # Keep relu inputs away from the kink
        for kind in ACTIVATIONS:
            self.check(lambda x: scalar_of(activation(x, kind)), [a], kind)

    def testSoftmaxAndNorms(self):
        """Test softmax, log_softmax, layer_norm and l2_normalize."""
        a = self.rng.normal(size=(3, 5))
        g = self.rng.normal(size=(5,))
        b = self.rng.normal(size=(5,))
        self.check(lambda x: scalar_of(softmax(x)), [a], "softmax")
        self.check(lambda x: scalar_of(log_softmax(x)), [a], "log_softmax")
        self.check(lambda x, g_, b_: scalar_of(layer_norm(x, g_, b_)),
                   [a, g, b], "layer_norm")
        self.check(lambda x: scalar_of(l2_normalize(x)), [a], "l2_normalize")

    def testCrossEntropy(self):
        """Test softmax_cross_entropy value and gradient."""
        logits = self.rng.normal(size=(6, 4))
        labels = np.array([0, 1, 2, 3, 1, 0])
        self.check(lambda x: softmax_cross_entropy(x, labels), [logits],
                   "cross entropy")
        with float64_mode():
            loss = softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
        self.assertTrue(
            abs(loss.item() - np.log(4)) < 1e-12,
            "returned uniform cross entropy unexpectedly.")

    def testAttentionBlock(self):
        """Test gradients through one attention block."""
        rng = np.random.default_rng(3)
        with float64_mode():
            params = init_attention_block(rng, 8, 2, 16)
        x = self.rng.normal(size=(2, 3, 8))
        self.check(lambda x_: scalar_of(attention_block(x_, params, 2)), [x],
                   "attention input")


class testGradientInstances(unittest.TestCase):
    """Define and test every differentiable op over many random instances."""
    def away_from_kink(self, a):
        return a + np.sign(a) * 0.1

    def cases(self, rng, seed):
        """(name, fn, arrays, tolerance) for one random instance."""
        m, k, n = rng.integers(1, 5, 3)
        logits = rng.normal(size=(int(m), 4))
        labels = rng.integers(0, 4, int(m))
        params = init_attention_block(np.random.default_rng(seed), 4, 2, 8)
        cases = [
            ('matmul', lambda x, y: scalar_of(matmul(x, y), seed),
             [rng.normal(size=(m, k)), rng.normal(size=(k, n))], LINEAR_TOL),
            ('add', lambda x, y: scalar_of(x + y, seed),
             [rng.normal(size=(m, k)), rng.normal(size=(k,))], LINEAR_TOL),
            ('mul', lambda x, y: scalar_of(x * y, seed),
             [rng.normal(size=(m, k)), rng.normal(size=(m, k))], LINEAR_TOL),
            ('div', lambda x, y: scalar_of(x / y, seed),
             [rng.normal(size=(m, k)), rng.uniform(0.5, 2.0, (m, k))],
             GENERAL_TOL),
            ('exp', lambda x: scalar_of(exp(x), seed),
             [rng.normal(size=(m, k))], GENERAL_TOL),
            ('log', lambda x: scalar_of(log(x), seed),
             [rng.uniform(0.5, 2.0, (m, k))], GENERAL_TOL),
            ('sum', lambda x: scalar_of(tsum(x, axis=0), seed),
             [rng.normal(size=(m, k))], LINEAR_TOL),
            ('conv2d', lambda x_, k_, b_: scalar_of(conv2d(x_, k_, b_), seed),
             [rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 2, 2)),
              rng.normal(size=(3,))], LINEAR_TOL),
            ('maxpool2d', lambda x: scalar_of(maxpool2d(x, 2), seed),
             [rng.permutation(32).reshape(1, 2, 4, 4) * 0.01], LINEAR_TOL),
            ('softmax', lambda x: scalar_of(softmax(x), seed),
             [rng.normal(size=(m, 5))], GENERAL_TOL),
            ('layer_norm',
             lambda x, g, b: scalar_of(layer_norm(x, g, b), seed),
             [rng.normal(size=(m, 5)), rng.normal(size=(5,)),
              rng.normal(size=(5,))], GENERAL_TOL),
            ('l2_normalize', lambda x: scalar_of(l2_normalize(x), seed),
             [rng.normal(size=(m, 5))], GENERAL_TOL),
            ('softmax_cross_entropy',
             lambda x: softmax_cross_entropy(x, labels), [logits],
             GENERAL_TOL),
            ('dropout',
             lambda x: scalar_of(dropout(x, 0.3, True,
                                         np.random.default_rng(seed)), seed),
             [rng.normal(size=(m, k))], LINEAR_TOL),
            ('attention_block',
             lambda x: scalar_of(attention_block(x, params, 2), seed),
             [rng.normal(size=(1, 3, 4))], GENERAL_TOL)]
        for kind in ACTIVATIONS:
            cases.append((kind, lambda x, kind=kind:
                          scalar_of(activation(x, kind), seed),
                          [self.away_from_kink(rng.normal(size=(m, k)))],
                          GENERAL_TOL))
        return cases

    def testRandomInstances(self):
        """Test each op passes finite differences on 20 random instances."""
        for seed in range(GRAD_INSTANCES):
            rng = np.random.default_rng(100 + seed)
            with float64_mode():
                for name, fn, arrays, tol in self.cases(rng, seed):
                    tensors = [Tensor(a) for a in arrays]
                    err = gradient_check(lambda: fn(*tensors), tensors,
                                         eps=1e-6)
                    self.assertTrue(err < tol, "%s instance %i gradient "
                                    "error %.2e." % (name, seed, err))


class testTensorState(unittest.TestCase):
    """Define and test interface for Tensor and the elementary ops."""
    def testBadArgs(self):
        """Test supplying functions with bad arguments."""
        with self.assertRaises(
                TypeError, msg="power accepted a string exponent."):
            power(Tensor([1.0, 2.0]), '2')

        with self.assertRaises(
                DimensionError, msg="matmul accepted a 1-d input."):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

        with self.assertRaises(
                DimensionError, msg="matmul accepted mismatched inner dims."):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

        with self.assertRaises(
                DimensionError, msg="conv2d accepted a channel mismatch."):
            conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 2, 2))))

        with self.assertRaises(
                DimensionError, msg="conv2d accepted an oversized kernel."):
            conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

        with self.assertRaises(
                ConfigError, msg="activation accepted an unknown kind."):
            activation(Tensor(np.ones(3)), 'swish')

        with self.assertRaises(
                IndexError, msg="cross entropy accepted label out of range."):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

        with self.assertRaises(
                DimensionError, msg="cross entropy accepted too few labels."):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0])

    def testBackwardTwice(self):
        """Test a consumed graph refuses a second backward pass."""
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(x * x)
        loss.backward()
        with self.assertRaises(
                StateError, msg="backward ran twice on the same graph."):
            loss.backward()

    def testBackwardNonScalar(self):
        """Test non-scalar roots need a seed gradient."""
        x = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(
                StateError, msg="backward ran on a vector without seed."):
            (x * 2.0).backward()
        y = x * 2.0
        y.backward(np.ones(3))
        self.assertTrue(
            np.allclose(x.grad, 2.0),
            "returned seeded gradient unexpectedly.")

    def testGradAccumulates(self):
        """Test a tensor used twice receives both contributions."""
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        tsum(x * x + x).backward()
        self.assertTrue(
            np.allclose(x.grad, [3.0, 5.0]),
            "returned accumulated gradient unexpectedly.")

    def testDtype(self):
        """Test default float32 and the float64 context."""
        self.assertTrue(
            Tensor([1, 2]).data.dtype == np.float32,
            "tensor did not default to float32.")
        with float64_mode():
            self.assertTrue(
                Tensor([1, 2]).data.dtype == np.float64,
                "tensor ignored float64 mode.")
        self.assertTrue(
            default_dtype() == np.float32,
            "float64 mode leaked out of its context.")

    def testDropout(self):
        """Test dropout config checks, eval identity and inverted scaling."""
        x = Tensor(np.ones((200, 50)))
        with self.assertRaises(
                ConfigError, msg="dropout accepted p = 1."):
            dropout(x, 1.0, True, np.random.default_rng(0))
        with self.assertRaises(
                ConfigError, msg="dropout trained without rng."):
            dropout(x, 0.5, True)
        self.assertTrue(
            np.array_equal(dropout(x, 0.5, False).data, x.data),
            "dropout changed input in eval mode.")
        out = dropout(x, 0.5, True, np.random.default_rng(0)).data
        kept = out[out > 0]
        self.assertTrue(
            np.allclose(kept, 2.0),
            "dropout did not rescale kept units by 1/(1-p).")
        self.assertTrue(
            abs(out.mean() - 1.0) < 0.05,
            "dropout changed the expected activation unexpectedly.")


class testOptimizers(unittest.TestCase):
    """Define and test interface for OptimizerState and optimizer_step."""
    def testBadArgs(self):
        """Test supplying OptimizerState with bad arguments."""
        with self.assertRaises(
                ConfigError, msg="accepted unknown optimizer."):
            OptimizerState('rmsprop')
        with self.assertRaises(
                ConfigError, msg="accepted non-positive lr."):
            OptimizerState('adam', lr=0.0)
        with self.assertRaises(
                ConfigError, msg="accepted negative weight decay."):
            OptimizerState('adam', weight_decay=-1.0)

    def testMissingGrad(self):
        """Test a step without gradients is refused."""
        p = Tensor(np.ones(3), requires_grad=True)
        with self.assertRaises(
                StateError, msg="optimizer stepped without gradients."):
            optimizer_step(OptimizerState('sgd', lr=0.1), [p])

    def testSgdStep(self):
        """Test one sgd step with weight decay."""
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        tsum(p * p).backward()
        optimizer_step(OptimizerState('sgd', lr=0.1, weight_decay=0.5), [p])
        # grad 2p + 0.5p = 2.5p; p - 0.25p
        self.assertTrue(
            np.allclose(p.data, [0.75, -1.5]),
            "returned sgd update unexpectedly.")
        zero_grads([p])
        self.assertTrue(p.grad is None, "zero_grads left a gradient.")

    def testAdamFirstStep(self):
        """Test bias correction makes the first adam step lr * sign(g)."""
        p = Tensor(np.array([3.0, -0.5, 0.2]), requires_grad=True)
        tsum(p * p).backward()
        optimizer_step(OptimizerState('adam', lr=0.01), [p])
        self.assertTrue(
            np.allclose(p.data, [2.99, -0.49, 0.19], atol=1e-5),
            "returned adam update unexpectedly.")

    def testAdamConverges(self):
        """Test adam minimizes a quadratic."""
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        state = OptimizerState('adam', lr=0.1)
        for _ in range(500):
            tsum(p * p).backward()
            optimizer_step(state, [p])
            zero_grads([p])
        self.assertTrue(
            np.abs(p.data).max() < 0.5,
            "adam did not converge on a quadratic.")

    def testBuffersRoundTrip(self):
        """Test optimizer buffers reload into a fresh state."""
        p = Tensor(np.ones(4), requires_grad=True)
        state = OptimizerState('adam', lr=0.01)
        tsum(p * p).backward()
        optimizer_step(state, [p])
        fresh = OptimizerState.from_dict(state.as_dict())
        fresh.load_buffers(state.buffers())
        self.assertTrue(
            fresh.as_dict() == state.as_dict(),
            "returned optimizer settings changed unexpectedly.")
        for name, arr in state.buffers().items():
            self.assertTrue(
                np.array_equal(fresh.buffers()[name], arr),
                "buffer %s changed unexpectedly." % name)


class testAttention(unittest.TestCase):
    """Define and test interface for the attention helpers."""
    def testBadArgs(self):
        """Test heads must divide the token width."""
        with self.assertRaises(
                ConfigError, msg="accepted width not divisible by heads."):
            init_attention_block(np.random.default_rng(0), 10, 3, 16)

    def testShapes(self):
        """Test unbatched and batched inputs keep their shape."""
        params = init_attention_block(np.random.default_rng(0), 8, 2, 16)
        x = np.random.default_rng(1).normal(size=(2, 5, 8))
        batched = attention_block(Tensor(x), params, 2)
        single = attention_block(Tensor(x[0]), params, 2)
        self.assertTrue(batched.shape == (2, 5, 8),
                        "returned batched shape unexpectedly.")
        self.assertTrue(
            np.allclose(batched.data[0], single.data, atol=1e-5),
            "batched and single outputs differ unexpectedly.")

    def testNamedParameters(self):
        """Test parameter names are unique and sorted."""
        params = {'blocks': [init_attention_block(np.random.default_rng(0),
                                                  4, 1, 8)]}
        names = [n for n, _ in named_parameters(params)]
        self.assertTrue(names == sorted(names) and len(set(names)) == len(names),
                        "returned parameter names unexpectedly.")
        self.assertTrue(all(n.startswith('blocks.0.') for n in names),
                        "returned parameter prefixes unexpectedly.")


if __name__ == '__main__':
    unittest.main()
