"""Real-vs-generated classifier and the flaw activation maps extracted from it.

The network is a small CNN with a global-average-pooled linear head, so vanilla
CAM is exact and Grad-CAM reduces to it up to a positive scale. Maps are always
taken with respect to the *fake* class, ReLU-ed, bilinearly upsampled to image
size and min-max normalised per image; a constant map carries no flaw signal
and normalises to all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import as_generator, check_images

REAL, FAKE = 0, 1


class HighlighterNet(nn.Module):
    """Conv stages -> ReLU feature maps ``A^k`` -> GAP -> 2-logit linear head."""

    def __init__(self, in_channels=1, channels=(16, 32, 32), pool_after=(1,)):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("the highlighter needs at least two convolutional stages")
        self.stages = nn.ModuleList()
        ch = in_channels
        for i, out in enumerate(channels):
            layers = [nn.Conv2d(ch, out, 3, padding=1), nn.ReLU()]
            if i in pool_after:
                layers.append(nn.AvgPool2d(2))
            self.stages.append(nn.Sequential(*layers))
            ch = out
        self.head = nn.Linear(ch, 2)

    def stage_outputs(self, x):
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs

    def features(self, x):
        return self.stage_outputs(x)[-1]

    def classify(self, feats):
        return self.head(feats.mean(dim=(2, 3)))

    def forward(self, x):
        return self.classify(self.features(x))


def normalize_map(m: torch.Tensor, rel_tol: float = 1e-6) -> torch.Tensor:
    """Per-image min-max normalisation of ``(N, H, W)`` maps; near-constant maps become zeros."""
    flat = m.reshape(m.shape[0], -1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    degenerate = span <= rel_tol * torch.clamp(hi.abs(), min=1e-30)
    out = (m - lo) / torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(degenerate, torch.zeros_like(out), out)


def _as_net(model) -> HighlighterNet:
    if isinstance(model, HighlighterNet):
        return model
    if isinstance(model, FlawHighlighter):
        check_is_fitted(model, "net_")
        return model.net_
    raise TypeError(f"expected a FlawHighlighter or HighlighterNet, got {type(model).__name__}")


def _finish(raw: torch.Tensor, size) -> np.ndarray:
    raw = F.relu(raw)[:, None]
    if tuple(raw.shape[-2:]) != tuple(size):
        raw = F.interpolate(raw, size=size, mode="bilinear", align_corners=False)
    return normalize_map(raw[:, 0]).detach().cpu().numpy().astype(np.float32)


def _batch(images):
    X = check_images(images, name="images")
    return torch.from_numpy(X)


def grad_cam(model, images, target: int = FAKE) -> np.ndarray:
    """Grad-CAM maps ``(N, H, W)`` in [0, 1] for ``target`` (default: fake).

    Channel weights are the spatial means of ``d logit_target / d A^k``.
    """
    net = _as_net(model)
    if target not in (REAL, FAKE):
        raise ValueError(f"target must be {REAL} (real) or {FAKE} (fake), got {target}")
    x = _batch(images).to(next(net.parameters()).dtype)
    with torch.enable_grad():
        feats = net.features(x).detach().requires_grad_(True)
        logits = net.classify(feats)
        # samples are independent through GAP, so the summed logit gives per-sample gradients
        (grads,) = torch.autograd.grad(logits[:, target].sum(), feats)
    weights = grads.mean(dim=(2, 3), keepdim=True)
    return _finish((weights * feats.detach()).sum(dim=1), x.shape[-2:])


@torch.no_grad()
def cam(model, images, target: int = FAKE) -> np.ndarray:
    """Vanilla CAM using the linear head's class weights as channel weights."""
    net = _as_net(model)
    if target not in (REAL, FAKE):
        raise ValueError(f"target must be {REAL} (real) or {FAKE} (fake), got {target}")
    x = _batch(images).to(next(net.parameters()).dtype)
    feats = net.features(x)
    w = net.head.weight[target][None, :, None, None]
    return _finish((w * feats).sum(dim=1), x.shape[-2:])


def mean_fam(fams) -> np.ndarray:
    """Elementwise mean of a non-empty sequence (or ``(N, H, W)`` stack) of maps.

    Accumulates in float64 and returns the input dtype; no renormalisation.
    """
    if isinstance(fams, np.ndarray) and fams.ndim == 3:
        stack = fams
    else:
        fams = list(fams)
        if not fams:
            raise ValueError("mean_fam needs at least one map")
        shapes = {np.shape(f) for f in fams}
        if len(shapes) != 1:
            raise ValueError(f"all maps must share one size, got {sorted(shapes)}")
        stack = np.stack([np.asarray(f) for f in fams])
    if stack.shape[0] == 0:
        raise ValueError("mean_fam needs at least one map")
    if stack.ndim != 3:
        raise ValueError(f"maps must be 2-D, got stack of shape {stack.shape}")
    out_dtype = stack.dtype if np.issubdtype(stack.dtype, np.floating) else np.float64
    stack = stack.astype(np.float64)
    # shifted mean: exact when all maps are identical
    out = stack[0] + (stack - stack[0]).mean(axis=0)
    return np.clip(out, stack.min(axis=0), stack.max(axis=0)).astype(out_dtype)


@dataclass
class ClassifierMetrics:
    accuracy: float
    f1: float
    roc_auc: float | None

    def as_dict(self):
        return {"accuracy": self.accuracy, "f1": self.f1, "roc_auc": self.roc_auc}


def roc_auc(labels, scores):
    """Mann-Whitney AUC with ties counted half; ``None`` when only one class is present."""
    labels = np.asarray(labels).astype(bool).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks: tied pairs contribute 1/2
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classifier_metrics(labels, scores, threshold: float = 0.5) -> ClassifierMetrics:
    """Accuracy and F1 at ``scores >= threshold`` (positive = fake) plus ROC-AUC."""
    labels = np.asarray(labels).ravel()
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if labels.shape != scores.shape:
        raise ValueError(f"labels ({labels.size}) and scores ({scores.size}) differ in length")
    if labels.size == 0:
        raise ValueError("need at least one labelled score")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary 0/1")
    y = labels.astype(bool)
    pred = scores >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return ClassifierMetrics(
        accuracy=float(np.mean(pred == y)), f1=float(f1), roc_auc=roc_auc(y, scores)
    )


class FlawHighlighter(ClassifierMixin, BaseEstimator):
    """Binary real (0) / fake (1) image classifier that emits flaw activation maps.

    ``transform`` returns Grad-CAM maps for the fake class, shape ``(N, H, W)``.

    Parameters
    ----------
    channels : tuple of int
        Output channels of the convolutional stages (at least two).
    epochs, batch_size, learning_rate : training schedule (Adam).
    validation_fraction : float
        Share of each class held out to report ``validation_accuracy_``.
    random_state : int
        Seeds weight init, the split and batch order.
    """

    def __init__(
        self,
        channels=(16, 32, 32),
        epochs=30,
        batch_size=32,
        learning_rate=2e-3,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.channels = channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _init_net(self, in_channels):
        with torch.random.fork_rng():
            torch.manual_seed(int(self.random_state))
            return HighlighterNet(in_channels, tuple(self.channels))

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y).ravel()
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} images but y has {y.shape[0]} labels")
        if not np.all(np.isin(y, (REAL, FAKE))):
            raise ValueError("labels must be 0 (real) or 1 (fake)")
        if np.all(y == REAL) or np.all(y == FAKE):
            raise ValueError("both real and fake images are required")

        gen = as_generator(self.random_state)
        val_idx, train_idx = [], []
        for cls in (REAL, FAKE):
            idx = np.flatnonzero(y == cls)
            perm = idx[torch.randperm(idx.size, generator=gen).numpy()]
            n_val = int(round(self.validation_fraction * idx.size))
            n_val = min(n_val, idx.size - 1)
            val_idx.append(perm[:n_val])
            train_idx.append(perm[n_val:])
        val_idx, train_idx = np.concatenate(val_idx), np.concatenate(train_idx)

        self.net_ = self._init_net(X.shape[1])
        self.classes_ = np.array([REAL, FAKE])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = tuple(X.shape[1:])
        Xt = torch.from_numpy(X)
        yt = torch.from_numpy(y.astype(np.int64))
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        train_t = torch.from_numpy(train_idx)
        self.loss_curve_ = []
        self.net_.train()
        for _ in range(int(self.epochs)):
            order = train_t[torch.randperm(train_t.numel(), generator=gen)]
            total = 0.0
            for start in range(0, order.numel(), int(self.batch_size)):
                batch = order[start : start + int(self.batch_size)]
                loss = F.cross_entropy(self.net_(Xt[batch]), yt[batch])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * batch.numel()
            self.loss_curve_.append(total / max(order.numel(), 1))
        self.net_.eval()

        if val_idx.size:
            self.validation_metrics_ = classifier_metrics(
                y[val_idx], self.predict_proba(X[val_idx])[:, FAKE]
            )
            self.validation_accuracy_ = self.validation_metrics_.accuracy
        else:
            self.validation_metrics_ = None
            self.validation_accuracy_ = float("nan")
        return self

    def _check_input(self, X):
        check_is_fitted(self, "net_")
        X = check_images(X)
        if tuple(X.shape[1:]) != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {tuple(X.shape[1:])}")
        return X

    @torch.no_grad()
    def decision_function(self, X):
        X = self._check_input(X)
        logits = self.net_(torch.from_numpy(X))
        return (logits[:, FAKE] - logits[:, REAL]).numpy()

    @torch.no_grad()
    def predict_proba(self, X):
        X = self._check_input(X)
        logits = self.net_(torch.from_numpy(X))
        return torch.softmax(logits.double(), dim=1).numpy()

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        return grad_cam(self, self._check_input(X), FAKE)

    def mean_map(self, X):
        """Batch-mean flaw activation map of ``X``."""
        return mean_fam(self.transform(X))

    @torch.no_grad()
    def embed(self, X):
        """Penultimate (GAP) features, shape ``(N, channels[-1])``."""
        X = self._check_input(X)
        feats = self.net_.features(torch.from_numpy(X))
        return feats.mean(dim=(2, 3)).double().numpy()

    @torch.no_grad()
    def stage_features(self, X):
        X = self._check_input(X)
        return [f.double() for f in self.net_.stage_outputs(torch.from_numpy(X))]


def train_highlighter(real, fake, **params) -> FlawHighlighter:
    """Fit a :class:`FlawHighlighter` on real (label 0) vs. generated (label 1) images."""
    real = check_images(real, name="real")
    fake = check_images(fake, name="fake")
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError(f"real images {real.shape[1:]} and fake images {fake.shape[1:]} differ in shape")
    X = np.concatenate([real, fake])
    y = np.concatenate([np.full(len(real), REAL), np.full(len(fake), FAKE)])
    return FlawHighlighter(**params).fit(X, y)


__all__ = [
    "REAL",
    "FAKE",
    "HighlighterNet",
    "FlawHighlighter",
    "NotFittedError",
    "ClassifierMetrics",
    "normalize_map",
    "grad_cam",
    "cam",
    "mean_fam",
    "roc_auc",
    "classifier_metrics",
    "train_highlighter",
]
