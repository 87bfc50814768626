#!/usr/bin/env python
"""Module for linear probing of model representations.

Probes:
    ridge_fit()           closed-form Tikhonov regression, alpha chosen on val
    SoftmaxProbe          single affine layer trained with adam
Metrics:
    r2_score(), kendall_tau(), accuracy()
Representations:
    Standardizer, PCA (linear, cosine kernel, rbf kernel), jacobi_eigh()
Targets:
    TASKS, task_targets()
"""
import logging

import numpy as np
import scipy.linalg
import scipy.stats

from scripts.modules.autodiff import Tensor, softmax_cross_entropy
from scripts.modules.attention import linear
from scripts.modules.errors import ConfigError, DataError, DimensionError
from scripts.modules.helperFunctions import rng_stream
from scripts.modules.optimizers import OptimizerState, optimizer_step, \
    zero_grads

ALPHA_GRID = np.logspace(-5, 3, 13)
PCA_KINDS = ['pca_linear', 'pca_cosine', 'pca_rbf']

logger = logging.getLogger(__name__)

# name -> (kind, record field); f1_<c> is resolved in task_targets()
TASKS = {
    'eph': ('regression', 'epoch'),
    'acc': ('regression', 'test_acc'),
    'ggap': ('regression', 'ggap'),
    'lr': ('regression', 'lr'),
    'l2reg': ('regression', 'l2_reg'),
    'drop': ('regression', 'dropout'),
    'tf': ('regression', 'train_fraction'),
    'act': ('classification', 'activation'),
    'init': ('classification', 'init'),
    'opt': ('classification', 'optimizer'),
}


def task_kind(task):
    if task.startswith('f1_'):
        return 'regression'
    if task not in TASKS:
        raise ConfigError('unknown task %s, expected one of %s or f1_<class>'
                          % (task, sorted(TASKS)))
    return TASKS[task][0]


def task_targets(task, rows):
    """Extract one task's targets from manifest sample rows.

    Raises:
        DataError: listing model ids without a defined target
    """
    kind = task_kind(task)
    values, missing = [], []
    for row in rows:
        if task.startswith('f1_'):
            c = int(task[3:])
            f1 = row.get('per_class_f1', [])
            value = f1[c] if c < len(f1) else None
        else:
            value = row.get(TASKS[task][1])
        if value is None:
            missing.append(row.get('model_id'))
        values.append(value)
    if missing:
        raise DataError('task %s undefined for models %s'
                        % (task, sorted(set(missing))))
    if kind == 'regression':
        return np.array(values, dtype=np.float64)
    return np.array(values)


# Metrics ----------------------------------------------------------------

def _check_pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise DimensionError('%i predictions for %i targets'
                             % (pred.shape[0], truth.shape[0]))
    if pred.shape[0] < 2:
        raise DataError('metric needs at least 2 samples, got %i'
                        % pred.shape[0])
    return pred, truth


def _r2(pred, truth):
    total = np.sum((truth - truth.mean()) ** 2)
    if total == 0:
        return float('nan')
    return float(1.0 - np.sum((pred - truth) ** 2) / total)


def r2_score(pred, truth):
    """Coefficient of determination; NaN with a warning for constant truth."""
    pred, truth = _check_pair(pred, truth)
    value = _r2(pred, truth)
    if np.isnan(value):
        logger.warning('R2 undefined: target variance is zero')
    return value


def kendall_tau(a, b):
    """Tie-corrected Kendall tau-b; NaN with a warning if a side is all tied."""
    a, b = _check_pair(a, b)
    if np.unique(a).size < 2 or np.unique(b).size < 2:
        logger.warning('Kendall tau undefined: one argument is constant')
        return float('nan')
    tau, _ = scipy.stats.kendalltau(a, b, variant='b')
    return float(tau)


def accuracy(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError('%i predictions for %i targets'
                             % (pred.shape[0], truth.shape[0]))
    if truth.size == 0:
        raise DataError('accuracy of an empty split')
    return float(np.mean(pred == truth))


# Ridge ------------------------------------------------------------------

class RidgeProbe(object):
    """Affine predictor t = Z @ coef + intercept."""

    def __init__(self, coef, intercept, alpha, val_r2=float('nan')):
        self.coef = coef
        self.intercept = intercept
        self.alpha = alpha
        self.val_r2 = val_r2

    def predict(self, Z):
        return np.asarray(Z, dtype=np.float64) @ self.coef + self.intercept


def ridge_solve(Z, t, alpha):
    """Solve (A^T A + P) r = A^T t with A = [Z, 1] and P = diag(alpha.., 0)."""
    Z = np.asarray(Z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != t.shape[0]:
        raise DimensionError('features %s do not match %i targets'
                             % (Z.shape, t.shape[0]))
    A = np.hstack([Z, np.ones((Z.shape[0], 1))])
    penalty = np.full(A.shape[1], float(alpha))
    penalty[-1] = 0.0
    gram = A.T @ A + np.diag(penalty)
    r = scipy.linalg.solve(gram, A.T @ t, assume_a='sym')
    return RidgeProbe(r[:-1], r[-1], float(alpha))


def ridge_fit(Z_train, t_train, Z_val=None, t_val=None, alphas=ALPHA_GRID):
    """Fit ridge probes over an alpha grid and keep the best on validation.

    Without a validation split the smallest alpha is used.

    Returns:
        RidgeProbe with alpha and val_r2 set
    """
    if Z_val is None or len(t_val) < 2:
        return ridge_solve(Z_train, t_train, alphas[0])
    t_val = np.asarray(t_val, dtype=np.float64)
    best = None
    for alpha in alphas:
        probe = ridge_solve(Z_train, t_train, alpha)
        probe.val_r2 = _r2(probe.predict(Z_val), t_val)
        score = -np.inf if np.isnan(probe.val_r2) else probe.val_r2
        if best is None or score > best[0]:
            best = (score, probe)
    return best[1]


# Softmax probe ----------------------------------------------------------

class SoftmaxProbe(object):
    """Linear classifier trained with adam and early stopping on val accuracy.

    Labels may be any hashable values; they are mapped to class indices.
    """

    def __init__(self, lr=1e-4, weight_decay=1e-6, epochs=200, patience=20,
                 batch_size=64, seed=0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed
        self.classes = None
        self.params = None
        self.epochs_run = 0

    def fit(self, Z_train, y_train, Z_val=None, y_val=None):
        Z_train = np.asarray(Z_train, dtype=np.float64)
        self.classes = np.unique(y_train)
        if self.classes.size < 2:
            raise DataError('softmax probe needs at least 2 classes in train, '
                            'got %s' % list(self.classes))
        targets = np.searchsorted(self.classes, y_train)
        d, c = Z_train.shape[1], self.classes.size
        self.params = {'W': Tensor(np.zeros((c, d)), requires_grad=True),
                       'b': Tensor(np.zeros(c), requires_grad=True)}
        flat = [self.params['W'], self.params['b']]
        state = OptimizerState('adam', self.lr, self.weight_decay)

        best_acc, best_params, stale = -1.0, None, 0
        n = Z_train.shape[0]
        for epoch in range(self.epochs):
            order = rng_stream(self.seed, 'softmax-probe', epoch).permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = softmax_cross_entropy(
                    linear(Tensor(Z_train[idx]), self.params), targets[idx])
                loss.backward()
                optimizer_step(state, flat)
                zero_grads(flat)
            self.epochs_run = epoch + 1

            if Z_val is None or len(y_val) == 0:
                continue
            acc = self.score(Z_val, y_val)
            if acc > best_acc:
                best_acc, stale = acc, 0
                best_params = [p.data.copy() for p in flat]
            else:
                stale += 1
                if stale >= self.patience:
                    break
        if best_params is not None:
            for p, data in zip(flat, best_params):
                p.data = data
        return self

    def predict(self, Z):
        logits = linear(Tensor(np.asarray(Z, dtype=np.float64)), self.params)
        return self.classes[logits.data.argmax(axis=1)]

    def score(self, Z, y):
        return accuracy(self.predict(Z), np.asarray(y))


# Representations --------------------------------------------------------

class Standardizer(object):
    """Per-dimension z-scoring on train statistics; constant columns pass."""

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std == 0] = 1.0
        self.std = std
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


def jacobi_eigh(A, tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns:
        (eigenvalues ascending, eigenvectors as columns)
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError('jacobi_eigh needs a square matrix, got %s'
                             % (A.shape,))
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max())):
        raise DimensionError('jacobi_eigh needs a symmetric matrix')
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.linalg.norm(A), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(A * A) - np.sum(np.diag(A) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if theta >= 0 else -1.0) \
                    / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * col_p - s * col_q
                A[:, q] = s * col_p + c * col_q
                row_p, row_q = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * row_p - s * row_q
                A[q, :] = s * row_p + c * row_q
                vec_p, vec_q = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vec_p - s * vec_q
                V[:, q] = s * vec_p + c * vec_q
    values = np.diag(A).copy()
    order = np.argsort(values)
    return values[order], V[:, order]


def eigh(A, solver='auto', jacobi_max_dim=256):
    if solver == 'jacobi' or (solver == 'auto' and A.shape[0] <= jacobi_max_dim):
        return jacobi_eigh(A)
    if solver not in ['auto', 'scipy']:
        raise ConfigError('unknown eigen solver %s' % solver)
    return scipy.linalg.eigh(A)


def _fix_signs(vectors):
    """Make the largest-magnitude entry of every column positive."""
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


class PCA(object):
    """Linear or kernel PCA fitted on a training matrix.

    Attributes:
        kind: 'pca_linear', 'pca_cosine' or 'pca_rbf'
        dim: int number of components
        gamma: float rbf width, default 1 / features
    """

    def __init__(self, kind, dim, gamma=None, solver='auto', jacobi_max_dim=256):
        if kind not in PCA_KINDS:
            raise ConfigError('unknown PCA kind %s' % kind)
        self.kind = kind
        self.dim = int(dim)
        self.gamma = gamma
        self.solver = solver
        self.jacobi_max_dim = jacobi_max_dim

    def _kernel(self, X, Y):
        if self.kind == 'pca_cosine':
            Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
            Yn = Y / np.maximum(np.linalg.norm(Y, axis=1, keepdims=True), 1e-12)
            return Xn @ Yn.T
        sq = (np.sum(X * X, axis=1)[:, None] + np.sum(Y * Y, axis=1)[None, :]
              - 2.0 * X @ Y.T)
        return np.exp(-self.gamma * np.maximum(sq, 0.0))

    def fit(self, X):
        X = np.asarray(X, dtype=np.float64)
        n, features = X.shape
        if self.dim > n:
            raise ConfigError('PCA dim %i exceeds %i training samples'
                              % (self.dim, n))
        if self.kind == 'pca_linear':
            if self.dim > features:
                raise ConfigError('PCA dim %i exceeds %i features'
                                  % (self.dim, features))
            self.mean = X.mean(axis=0)
            Xc = X - self.mean
            cov = Xc.T @ Xc / max(n - 1, 1)
            values, vectors = eigh(cov, self.solver, self.jacobi_max_dim)
            self.eigenvalues = values[::-1][:self.dim]
            self.components = _fix_signs(vectors[:, ::-1][:, :self.dim])
            return self

        if self.gamma is None:
            self.gamma = 1.0 / features
        self.X_train = X
        K = self._kernel(X, X)
        self.K_col_mean = K.mean(axis=0)
        self.K_mean = K.mean()
        Kc = K - self.K_col_mean[None, :] - self.K_col_mean[:, None] \
            + self.K_mean
        values, vectors = eigh(Kc, self.solver, self.jacobi_max_dim)
        values = values[::-1][:self.dim]
        vectors = _fix_signs(vectors[:, ::-1][:, :self.dim])
        self.eigenvalues = values
        self.alphas = vectors / np.sqrt(np.maximum(values, 1e-12))
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.kind == 'pca_linear':
            return (X - self.mean) @ self.components
        k = self._kernel(X, self.X_train)
        kc = k - self.K_col_mean[None, :] - k.mean(axis=1, keepdims=True) \
            + self.K_mean
        return kc @ self.alphas


def fit_pca(X_train, kind, dim, gamma=None, solver='auto', jacobi_max_dim=256):
    return PCA(kind, dim, gamma, solver, jacobi_max_dim).fit(X_train)


# Cells ------------------------------------------------------------------

def fit_probe_cell(task, train, val, test, seed=0, softmax_kwargs=None):
    """Fit one (representation, task) probe and score it on test.

    Args:
        task: str task name
        train, val, test: (features, targets) pairs
        seed: int softmax probe seed
        softmax_kwargs: optional SoftmaxProbe overrides

    Returns:
        (result dict, fitted probe); result holds metric, value, alpha and
            tau (regression only)
    """
    (Z_tr, t_tr), (Z_va, t_va), (Z_te, t_te) = train, val, test
    if len(t_tr) == 0 or len(t_te) == 0:
        raise DataError('task %s has an empty train or test split' % task)
    if task_kind(task) == 'regression':
        probe = ridge_fit(Z_tr, t_tr, Z_va, t_va)
        pred = probe.predict(Z_te)
        return ({'metric': 'r2', 'value': r2_score(pred, t_te),
                 'alpha': probe.alpha, 'tau': kendall_tau(pred, t_te)}, probe)
    probe = SoftmaxProbe(seed=seed, **(softmax_kwargs or {}))
    probe.fit(Z_tr, t_tr, Z_va, t_va)
    return ({'metric': 'accuracy', 'value': probe.score(Z_te, t_te),
             'alpha': float('nan'), 'tau': float('nan')}, probe)


class ProbeReport(object):
    """Rows of (zoo, source, task, metric, value, alpha, tau, split sizes)."""

    COLUMNS = ['zoo', 'source', 'task', 'metric', 'value', 'alpha', 'tau',
               'n_train', 'n_val', 'n_test']

    def __init__(self, rows=None):
        self.rows = rows or []

    def add(self, **row):
        self.rows.append({k: row.get(k) for k in self.COLUMNS})

    def value(self, source, task):
        for row in self.rows:
            if row['source'] == source and row['task'] == task:
                return row['value']
        raise KeyError('%s/%s not in report' % (source, task))

    def sources(self):
        return sorted(set(r['source'] for r in self.rows))

    def tasks(self):
        return sorted(set(r['task'] for r in self.rows))
