"""Small randomized adaptation instances shared by the loss and acceptance tests."""
from dataclasses import dataclass

import numpy as np

from segda.autograd import Parameter, l2_normalize, reshape, transpose
from segda.etf import dr_loss, make_etf
from segda.losses import (
    adaptation_loss,
    combined_loss,
    corrected_distribution,
    cross_entropy,
    discovery_loss,
    restricted_softmax,
)
from segda.networks import ArchConfig, ClassEmbedder, PixelModule, SegmentModule, class_embeddings
from segda.noise import noise_transition
from segda.pipeline import Classifier
from segda.teacher import make_bundle

NUM_CLASSES = 6
TINY = ArchConfig(stem_channels=3, mid_channels=4, enc_channels=4, dec_channels=4, feature_dim=6, ffn_hidden=5)

# parameter groups each loss can reach; everything else gets exact zeros
REACH = {
    "dr": ("encoder", "pixel_decoder"),
    "dapt": ("encoder", "segment_decoder"),
    "corr": ("encoder", "pixel_decoder"),
    "dis": ("encoder", "pixel_decoder"),
    "combined": ("encoder", "pixel_decoder", "segment_decoder"),
}


def teacher_field(rng, C=NUM_CLASSES, H=8, W=8, confident_classes=(1, 3)):
    """Probability field mixing confident pixels with low-confidence ones."""
    probs = np.empty((C, H, W))
    kind = rng.integers(0, 3, (H, W))
    kind[0, 0], kind[0, 1] = 0, 1
    for i in range(H):
        for j in range(W):
            if kind[i, j] == 0:  # confident
                c = confident_classes[rng.integers(len(confident_classes))]
                p = np.full(C, 0.05 / (C - 1))
                p[c] = 0.95
            elif kind[i, j] == 1:  # low confidence, argmax outside the confident set
                p = np.full(C, 1.0 / C) + rng.uniform(-0.01, 0.01, C)
                out = [c for c in range(C) if c not in confident_classes]
                p[out[rng.integers(len(out))]] = 1.0 / C + 0.015
            else:
                p = rng.dirichlet(np.ones(C)) * 0.5
                p[rng.integers(C)] += 0.5
            probs[:, i, j] = p / p.sum()
    return probs


@dataclass
class Instance:
    pixel: PixelModule
    segment: SegmentModule
    classifier: Classifier
    params: dict
    losses: dict  # name -> zero-arg closure returning a scalar Tensor
    bundle: object
    transition: np.ndarray


def make_instance(seed: int, logit_scale: float = 5.0, network: bool = True) -> Instance:
    """``network=False`` replaces the pixel module by leaf feature maps so the
    losses are differentiated with respect to their own inputs."""
    rng = np.random.default_rng(seed)
    C, d = NUM_CLASSES, TINY.feature_dim
    pixel = PixelModule(TINY, seed=seed)
    for k, p in pixel.params.items():
        if k.endswith(".b") or k.endswith(".beta"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
    segment = SegmentModule(d, TINY.enc_channels, TINY.ffn_hidden, seed=seed + 1)
    for k in ("seg.ffn.b1", "seg.ffn.b2"):
        segment.params[k].data[...] = rng.normal(0.0, 0.1, segment.params[k].shape)
    clf = Classifier(make_etf(C, d, rotation_seed=seed + 1))
    emb = ClassEmbedder(C, d, seed=seed + 2)

    image = rng.random((1, 3, 8, 8))
    source_image = rng.random((1, 3, 8, 8))
    source_labels = rng.integers(0, C, (1, 8, 8))
    bundle = make_bundle(teacher_field(rng), 0.8, 0.2)
    present = bundle.present_classes
    queries = class_embeddings(present, emb)
    protos = clf.prototypes()

    if network:
        def target_forward():
            return pixel.forward(image, training=True, update_stats=False)

        def source_forward():
            return pixel.forward(source_image, training=True, update_stats=False)[1]
    else:
        F0, f0 = pixel.forward(image, training=False)
        leaves = {
            "F": Parameter(F0.data, "F", "encoder"),
            "f": Parameter(f0.data, "f", "pixel_decoder"),
            "f_src": Parameter(pixel.forward(source_image, training=False)[1].data, "f_src", "pixel_decoder"),
        }

        def target_forward():
            return leaves["F"], leaves["f"]

        def source_forward():
            return leaves["f_src"]

    # N is a constant of the step, built from the representation before any update;
    # the noisy representation is a perturbed copy of S so that N stays near-diagonal
    S0 = segment.forward(target_forward()[0], queries).data
    noisy = S0 + 0.1 * rng.standard_normal(S0.shape)
    noisy /= np.linalg.norm(noisy, axis=0, keepdims=True)
    N = noise_transition(S0, noisy, present).matrix

    def dr_from(f):
        unit = l2_normalize(f, axis=1)
        flat = reshape(transpose(unit, (1, 0, 2, 3)), (d, 64))
        return dr_loss(flat, source_labels.reshape(-1), clf.etf)

    def logits(f):
        return reshape(clf.logits(f, logit_scale), (C, 8, 8))

    def l_dapt(F=None):
        F = target_forward()[0] if F is None else F
        return adaptation_loss(segment.forward(F, queries), present, protos)

    def l_corr(f=None):
        f = target_forward()[1] if f is None else f
        q, _ = corrected_distribution(N, restricted_softmax(logits(f), present))
        return cross_entropy(q, bundle.confident_onehot, bundle.confident_mask)

    def l_dis(f=None):
        f = target_forward()[1] if f is None else f
        return discovery_loss(restricted_softmax(logits(f), bundle.residual_classes),
                              bundle.discovery_onehot, bundle.discovery_mask)

    def l_dr():
        return dr_from(source_forward())

    def l_total():
        F, f = target_forward()
        return combined_loss(l_dapt(F), l_dr(), l_corr(f), l_dis(f)).total

    params = {**(pixel.params if network else leaves), **segment.params}
    losses = {"dr": l_dr, "dapt": l_dapt, "corr": l_corr, "dis": l_dis, "combined": l_total}
    return Instance(pixel, segment, clf, params, losses, bundle, N)


def reached(inst: Instance, loss: str) -> list:
    return [k for k, p in inst.params.items() if p.group in REACH[loss]]


# oracles

def pseudo_label_oracle(probs, tau_h, tau_l):
    """Per-pixel scan returning (present, residual, {pixel: class} confident, {pixel: class} discovery)."""
    C, H, W = probs.shape
    confident, present = {}, set()
    for i in range(H):
        for j in range(W):
            col = [probs[c, i, j] for c in range(C)]
            best = max(range(C), key=lambda c: (col[c], -c))
            if col[best] > tau_h:
                confident[(i, j)] = best
                present.add(best)
    present = sorted(present)
    residual = [c for c in range(C) if c not in present]
    discovery = {}
    for i in range(H):
        for j in range(W):
            col = [probs[c, i, j] for c in range(C)]
            best = max(range(C), key=lambda c: (col[c], -c))
            if col[best] < tau_l and best not in present:
                discovery[(i, j)] = best
    return present, residual, confident, discovery


def random_prob_field(rng, C):
    kind = rng.integers(0, 3)
    if kind == 0:
        logits = rng.standard_normal((C, 16, 16)) * rng.uniform(0.5, 6.0)
    elif kind == 1:
        logits = rng.standard_normal((C, 16, 16)) * 0.05
    else:
        logits = rng.standard_normal((C, 16, 16)) * np.where(rng.random((1, 16, 16)) < 0.5, 5.0, 0.05)
    e = np.exp(logits - logits.max(axis=0))
    return e / e.sum(axis=0)


def brute_confusion(truth, pred, C):
    conf = np.zeros((C, C), dtype=np.int64)
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        conf[t, p] += 1
    return conf


def brute_miou(truth, pred, C):
    ious = []
    for c in range(C):
        tp = sum(1 for t, p in zip(truth.ravel(), pred.ravel()) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth.ravel(), pred.ravel()) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth.ravel(), pred.ravel()) if t == c and p != c)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)
