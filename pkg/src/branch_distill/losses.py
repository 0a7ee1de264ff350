"""Objectives for multi-branch adversarial self-distillation.

All batch expectations are arithmetic means over the mini-batch. Every
function accepts either a :class:`~branch_distill.nn.BranchOutputs` or the
corresponding plain list of tensors.
"""

import math
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericFault
from .nn import BranchOutputs, discriminator_input_grad, frozen

COSINE_FLOOR = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.3
    beta: float = 0.03
    gamma: float = 0.1
    temperature: float = 3.0
    mu_r: float = 0.5
    lambda_gp: float = 10.0
    lambda1: float = 0.3
    lambda2: float = 0.03
    lambda3: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value):
                raise ConfigError(f"{name} must be finite, got {value}")
        for name in ("alpha", "mu_r"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("beta", "gamma", "lambda_gp", "lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        return self


def _logits(outputs):
    return list(outputs.logits) if isinstance(outputs, BranchOutputs) else list(outputs)


def _features(outputs):
    return list(outputs.features) if isinstance(outputs, BranchOutputs) else list(outputs)


def _check_finite(t, name):
    if not np.all(np.isfinite(ad.as_tensor(t).data)):
        raise NumericFault(name)


# --------------------------------------------------------------------------
# probabilities
# --------------------------------------------------------------------------


def log_softmax(logits):
    logits = ad.as_tensor(logits)
    _check_finite(logits, "logits")
    # the max shift is a constant: softmax is shift invariant, so detaching it is exact
    shifted = logits - Tensor(logits.data.max(axis=-1, keepdims=True))
    return shifted - ad.log(ad.sum_(ad.exp(shifted), axis=-1, keepdims=True))


def softmax_probs(logits):
    logits = ad.as_tensor(logits)
    _check_finite(logits, "logits")
    e = ad.exp(logits - Tensor(logits.data.max(axis=-1, keepdims=True)))
    return e / ad.sum_(e, axis=-1, keepdims=True)


def softened_probs(logits, temperature):
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if temperature == 1:
        return softmax_probs(logits)
    return softmax_probs(ad.as_tensor(logits) / temperature)


def one_hot(labels, classes, dtype=None):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError(f"labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, classes), dtype=dtype or ad.get_default_dtype())
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


# --------------------------------------------------------------------------
# supervised and output-level distillation
# --------------------------------------------------------------------------


def loss_ce(outputs, labels):
    """Sum over classifiers of the batch-mean cross-entropy."""
    logits = _logits(outputs)
    y = Tensor(one_hot(labels, logits[0].shape[1]))
    total = None
    for a in logits:
        term = -ad.mean(ad.sum_(y * log_softmax(a), axis=1))
        total = term if total is None else total + term
    return total


def _kl_rows(logp, logq):
    """Batch mean of KL(p || q) from log-probabilities; 0 log 0 contributes 0."""
    return ad.mean(ad.sum_(ad.exp(logp) * (logp - logq), axis=1))


def loss_kl_pairwise(outputs, temperature, detach_target=False):
    """(1/K) times the sum of KL(q_i || q_j) over all ordered pairs i != j.

    Gradients reach both arguments unless ``detach_target`` is set, in which
    case the second argument of every pair is a constant.
    """
    if not temperature > 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    logits = _logits(outputs)
    k = len(logits) - 1
    if k == 0:
        warnings.warn("pairwise KL needs at least two classifiers; returning 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    logq = [log_softmax(ad.as_tensor(a) / temperature) for a in logits]
    targets = [ad.detach(t) for t in logq] if detach_target else logq
    total = None
    for i in range(k + 1):
        for j in range(k + 1):
            if i == j:
                continue
            term = _kl_rows(logq[i], targets[j])
            total = term if total is None else total + term
    return total / k


# --------------------------------------------------------------------------
# similarity maps
# --------------------------------------------------------------------------


def similarity_map(f):
    """(B, C, H, W) feature map -> (B, N, N) cosine similarities between spatial positions."""
    f = ad.as_tensor(f)
    if f.ndim != 4:
        raise ContractError(f"similarity_map needs a (B, C, H, W) map, got shape {f.shape}")
    B, C, H, W = f.shape
    n = H * W
    flat = ad.reshape(f, (B, C, n))
    gram = ad.matmul(ad.transpose(flat, (0, 2, 1)), flat)
    norms = ad.l2_norm(flat, axis=1)
    denom = ad.reshape(norms, (B, n, 1)) * ad.reshape(norms, (B, 1, n))
    return gram / ad.maximum_scalar(denom, COSINE_FLOOR)


def align_feature_maps(features):
    """Average-pool every map down to the smallest spatial grid among them."""
    feats = [ad.as_tensor(f) for f in features]
    h = min(f.shape[2] for f in feats)
    w = min(f.shape[3] for f in feats)
    out = []
    for f in feats:
        fh, fw = f.shape[2], f.shape[3]
        if (fh, fw) == (h, w):
            out.append(f)
            continue
        if fh % h or fw % w or fh // h != fw // w:
            raise ConfigError(f"cannot pool a {fh}x{fw} feature map onto a common {h}x{w} grid")
        out.append(ad.avg_pool2d(f, fh // h))
    return out


def _sq_dist(a, b, n):
    d = a - b
    return ad.mean(ad.sum_(ad.square(d), axis=(1, 2))) / float(n * n)


def loss_l2_simmaps(outputs):
    """Distance between each classifier's similarity map and every deeper one.

    The deeper map is detached inside each pair, so gradients only reach
    the shallower classifier's path. The deepest classifier contributes no
    outer term.
    """
    feats = align_feature_maps(_features(outputs))
    count = len(feats)
    if count < 2:
        return Tensor(0.0)
    maps = [similarity_map(f) for f in feats]
    n = maps[0].shape[1]
    total = None
    for i in range(count - 1):
        inner = None
        for j in range(i + 1, count):
            term = _sq_dist(maps[i], ad.detach(maps[j]), n)
            inner = term if inner is None else inner + term
        inner = inner / float(count - 1 - i)
        total = inner if total is None else total + inner
    return total


# --------------------------------------------------------------------------
# adversarial terms
# --------------------------------------------------------------------------


def real_mix(probs, y_onehot, mu_r):
    """Critic's real sample: mu_r times the ensemble mean plus (1 - mu_r) times the labels. Detached."""
    if not 0.0 <= mu_r <= 1.0:
        raise ContractError(f"mu_r must lie in [0, 1], got {mu_r}")
    probs = [ad.as_tensor(p).data for p in probs]
    ens = probs[0].copy()
    for p in probs[1:]:
        ens = ens + p
    y = np.asarray(y_onehot.data if isinstance(y_onehot, Tensor) else y_onehot, dtype=ens.dtype)
    return Tensor((mu_r / len(probs)) * ens + (1.0 - mu_r) * y)


def _stack(probs, images):
    n = len(probs)
    p = probs[0] if n == 1 else ad.concat(probs, axis=0)
    img = ad.as_tensor(images)
    if n > 1:
        img = Tensor(np.concatenate([img.data] * n, axis=0))
    return p, img


def loss_discriminator_wgangp(d, probs, r, images, lambda_gp, eps):
    """Critic objective: mean fake score minus real score plus the gradient penalty.

    ``eps`` holds one interpolation weight per sample, shared by all
    classifiers: ``p_hat = eps * r + (1 - eps) * p_i``.
    """
    probs = [ad.as_tensor(p) for p in probs]
    for p in probs:
        if p.requires_grad:
            raise ContractError("generator probabilities must be detached for the critic step")
    r = ad.detach(ad.as_tensor(r))
    eps = np.asarray(eps, dtype=r.dtype).reshape(-1, 1)
    if eps.shape[0] != r.shape[0]:
        raise ContractError(f"need one interpolation weight per sample, got {eps.shape[0]} for batch {r.shape[0]}")
    fake_p, img = _stack(probs, images)
    fake = ad.mean(d(fake_p, img))
    real = ad.mean(d(r, images))
    p_hat = np.concatenate([eps * r.data + (1.0 - eps) * p.data for p in probs], axis=0)
    g = discriminator_input_grad(d, Tensor(p_hat), img)
    penalty = ad.mean(ad.square(ad.l2_norm(g, axis=1) - 1.0))
    return fake - real + lambda_gp * penalty


def loss_generator_w(d, probs, images):
    """Negative mean critic score over all classifiers' live probabilities."""
    probs = [ad.as_tensor(p) for p in probs]
    p, img = _stack(probs, images)
    with frozen(d):
        return -ad.mean(d(p, img))


def loss_sd_total(ce, kl, l2, w, weights):
    """(1 - alpha) CE + alpha KL + beta L2 + gamma W."""
    for name, value in (("loss_ce", ce), ("loss_kl", kl), ("loss_l2", l2), ("loss_w", w)):
        _check_finite(value, name)
    return (1.0 - weights.alpha) * ce + weights.alpha * kl + weights.beta * l2 + weights.gamma * w


class KDLoss(NamedTuple):
    total: Tensor
    kl: Tensor
    l2: Tensor
    w: Tensor


KD_PAIRINGS = ("matched", "all")


def _kd_pairs(count, pairing):
    """(student i, teacher j) index pairs for the KL and L2 terms."""
    if pairing == "matched":
        return [(i, i) for i in range(count)], [(i, [i]) for i in range(count)]
    if pairing == "all":
        kl = [(i, j) for i in range(count) for j in range(count)]
        return kl, [(i, list(range(i, count))) for i in range(count)]
    raise ConfigError(f"kd pairing must be one of {KD_PAIRINGS}, got {pairing!r}")


def loss_kd_total(teacher, student, weights, d=None, images=None, pairing="matched"):
    """Cross-network terms between a frozen branched teacher and a branched student.

    ``pairing="matched"`` compares student classifier i with teacher classifier
    i only, so identical networks give zero KL and L2. ``pairing="all"`` uses
    every (student i, teacher j) pair for KL and every teacher map j >= i for
    L2 (averaged over j, summed over i). W is the generator critic term on
    student probabilities, with ``d`` trained against a teacher-built real sample.
    """
    t_logits, s_logits = _logits(teacher), _logits(student)
    if len(t_logits) != len(s_logits):
        raise ConfigError(f"teacher has {len(t_logits)} classifiers, student has {len(s_logits)}")
    count = len(s_logits)
    kl_pairs, l2_pairs = _kd_pairs(count, pairing)
    temp = weights.temperature
    t_logits = [ad.detach(a) for a in t_logits]
    t_logq = [log_softmax(ad.as_tensor(a) / temp) for a in t_logits]
    s_logq = [log_softmax(ad.as_tensor(a) / temp) for a in s_logits]
    kl = None
    for i, j in kl_pairs:
        term = _kl_rows(t_logq[j], s_logq[i])
        kl = term if kl is None else kl + term
    kl = kl / float(len(kl_pairs))

    t_feats = [ad.detach(f) for f in _features(teacher)]
    aligned = align_feature_maps(_features(student) + t_feats)
    s_maps = [similarity_map(f) for f in aligned[:count]]
    t_maps = [similarity_map(f) for f in aligned[count:]]
    n = s_maps[0].shape[1]
    l2 = None
    for i, targets in l2_pairs:
        inner = None
        for j in targets:
            term = _sq_dist(s_maps[i], t_maps[j], n)
            inner = term if inner is None else inner + term
        inner = inner / float(len(targets))
        l2 = inner if l2 is None else l2 + inner

    if d is not None and images is not None:
        w = loss_generator_w(d, [softmax_probs(a) for a in s_logits], images)
    else:
        w = Tensor(0.0)
    total = weights.lambda1 * kl + weights.lambda2 * l2 + weights.lambda3 * w
    return KDLoss(total, kl, l2, w)
