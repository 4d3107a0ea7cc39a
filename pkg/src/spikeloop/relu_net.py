"""The software model: a bias-free ReLU MLP (default 100-15-15-5) trained by
mini-batch gradient descent with momentum and weight clipping.

The backward pass is written so that externally measured activities can be
substituted for the forward activations — the in-the-loop trainer reuses it
unchanged with rate-derived activities.
"""

from dataclasses import dataclass

import numpy as np

from . import dataset, seeds

DEFAULT_TOPOLOGY = (100, 15, 15, 5)


@dataclass
class HyperParams:
    eta: float = 0.05
    gamma: float = 0.9
    lam: float = 0.001
    batch_size: int = 100
    steps: int = 15000

    def validate(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0,1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")


@dataclass
class SoftwareTrainResult:
    weights: list  # per-layer (n_out, n_in) float64
    velocity: list
    steps: int
    master_seed: int
    topology: tuple
    batch_accuracy: np.ndarray  # per-step accuracy on the training batch
    classes: tuple = dataset.REDUCED_CLASSES


def check_topology(layer_sizes):
    layer_sizes = tuple(int(n) for n in layer_sizes)
    if len(layer_sizes) < 2 or any(n < 1 for n in layer_sizes):
        raise ValueError(f"invalid topology {layer_sizes}")
    return layer_sizes


def init_weights(topology, seed):
    """Truncated-normal init: sd 1/sqrt(fan_in), draws with |w| > 2*sd redrawn.

    `seed` may be an int or a numpy SeedSequence. Entries are finally clipped
    to [-1,1] (only binding for fan-in < 4).
    """
    topology = check_topology(topology)
    rng = np.random.Generator(np.random.PCG64(seed))
    weights = []
    for n_in, n_out in zip(topology[:-1], topology[1:]):
        sigma = 1.0 / np.sqrt(n_in)
        w = rng.normal(0.0, sigma, size=(n_out, n_in))
        bad = np.abs(w) > 2.0 * sigma
        while bad.any():
            w[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
            bad = np.abs(w) > 2.0 * sigma
        weights.append(np.clip(w, -1.0, 1.0))
    return weights


def forward(weights, x):
    """Forward pass. Returns the list of per-layer activities [x, a1, ..., y].

    x: (batch, n_in) or (n_in,). Every layer, including the label layer, is
    ReLU and bias-free.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x]
    for w in weights:
        x = np.maximum(x @ w.T, 0.0)
        acts.append(x)
    return acts


def cost(weights, label_acts, targets, lam=0.001, label_scale=15.0):
    """Batch cost: (1/5)*sum_s ||y_s/label_scale - target_s||^2 + sum (lam/2) W^2.

    The data term is a plain sum over the batch (no 1/batch factor); the
    label activity is divided by `label_scale` (second-hidden-layer size for
    the software model) before comparison.
    """
    y = np.atleast_2d(label_acts) / label_scale
    t = np.atleast_2d(targets)
    data = np.sum((y - t) ** 2) / 5.0
    reg = sum(0.5 * lam * np.sum(w**2) for w in weights)
    return float(data + reg)


def backward(weights, acts, targets, lam=0.001, label_scale=15.0):
    """Exact gradient of cost() wrt each weight matrix.

    `acts` is the forward() list, or any same-shaped list of measured
    activities; the ReLU derivative mask is taken from activity > 0
    (subgradient at exactly 0 is 0).
    """
    t = np.atleast_2d(targets)
    y = acts[-1] / label_scale
    delta = (2.0 / (5.0 * label_scale)) * (y - t)
    delta = delta * (acts[-1] > 0)
    grads = [None] * len(weights)
    for n in range(len(weights) - 1, -1, -1):
        grads[n] = delta.T @ np.atleast_2d(acts[n]) + lam * weights[n]
        if n > 0:
            delta = (delta @ weights[n]) * (acts[n] > 0)
    return grads


def step(weights, velocity, grads, eta, gamma):
    """Momentum update with clipping: v <- eta*g + gamma*v; w <- clip(w - v)."""
    new_v = [eta * g + gamma * v for g, v in zip(grads, velocity)]
    new_w = [np.clip(w - v, -1.0, 1.0) for w, v in zip(weights, new_v)]
    return new_w, new_v


def classify(weights, pixels, classes=dataset.REDUCED_CLASSES):
    """Predicted digit per image; argmax over label activities, ties -> lowest index."""
    y = forward(weights, pixels)[-1]
    return np.asarray(classes)[np.argmax(y, axis=1)]


def accuracy(weights, pixels, labels, classes=dataset.REDUCED_CLASSES):
    return float(np.mean(classify(weights, pixels, classes) == labels))


def train_software(split, hp: HyperParams, master_seed: int, topology=DEFAULT_TOPOLOGY):
    """Phase-A training. Deterministic for (split, hp, master_seed)."""
    hp.validate()
    topology = check_topology(topology)
    weights = init_weights(topology, seeds.sequence(master_seed, seeds.SW_INIT))
    velocity = [np.zeros_like(w) for w in weights]
    batch_iter = dataset.batches(
        split, hp.batch_size, seeds.sequence(master_seed, seeds.SW_BATCHES)
    )
    batch_acc = np.empty(hp.steps)
    classes = np.asarray(split.classes)
    for k in range(hp.steps):
        pix, lab = next(batch_iter)
        acts = forward(weights, pix)
        pred = classes[np.argmax(acts[-1], axis=1)]
        batch_acc[k] = np.mean(pred == lab)
        targets = dataset.one_hot(lab, split.classes)
        grads = backward(weights, acts, targets, hp.lam, label_scale=topology[-2])
        weights, velocity = step(weights, velocity, grads, hp.eta, hp.gamma)
    return SoftwareTrainResult(
        weights=weights,
        velocity=velocity,
        steps=hp.steps,
        master_seed=master_seed,
        topology=topology,
        batch_accuracy=batch_acc,
        classes=split.classes,
    )
