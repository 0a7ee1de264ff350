"""Brute-force references for testing.

Everything here is written as explicit Python loops over plain floats and
shares no arithmetic with :mod:`branch_distill.losses` or the autodiff
primitives. Slow by design; keep instances small.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericFault


@dataclass(frozen=True)
class FiniteDiffSpec:
    h: float = 1e-5
    scheme: str = "central"
    tolerance: float = 1e-6

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"finite-difference step must be > 0, got {self.h}")
        if self.scheme != "central":
            raise ValueError(f"only the central scheme is supported, got {self.scheme!r}")


def rel_error(a, b):
    """Largest elementwise |a - b| / max(1e-12, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def rel_error_norm(a, b):
    """Array-level |a - b|_inf / max(1e-12, |a|_inf, |b|_inf).

    Robust to finite-difference rounding on entries whose true value is near 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def _values(v):
    """The ndarray behind a Tensor, or ``v`` itself (ndarray.data is a memoryview)."""
    return v if isinstance(v, (np.ndarray, np.generic, float, int)) else v.data


def _scalar(v):
    v = _values(v)
    return float(np.asarray(v).reshape(()))


def fd_grad(f, x, spec=None, indices=None):
    """Central-difference gradient of scalar ``f(x)`` with respect to ``x``.

    ``x`` (a Tensor or ndarray) is perturbed in place and restored. With
    ``indices`` only those flat positions are differentiated and a 1-D array
    is returned.
    """
    spec = spec or FiniteDiffSpec()
    arr = _values(x)
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("fd_grad needs a contiguous array it can perturb in place")
    positions = range(flat.size) if indices is None else [int(i) for i in indices]
    out = []
    for i in positions:
        orig = flat[i]
        flat[i] = orig + spec.h
        up = _scalar(f(x))
        flat[i] = orig - spec.h
        down = _scalar(f(x))
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericFault("fd_grad", f"f is not finite near flat index {i}")
        out.append((up - down) / (2.0 * spec.h))
    g = np.array(out, dtype=np.float64)
    return g.reshape(arr.shape) if indices is None else g


# --------------------------------------------------------------------------
# probabilities
# --------------------------------------------------------------------------


def naive_softmax_row(row, temperature=1.0):
    scaled = [v / temperature for v in row]
    top = max(scaled)
    exps = [math.exp(v - top) for v in scaled]
    total = 0.0
    for e in exps:
        total += e
    return [e / total for e in exps]


def naive_softmax(logits, temperature=1.0):
    return [naive_softmax_row(row, temperature) for row in np.asarray(logits).tolist()]


def _kl(p, q):
    total = 0.0
    for pi, qi in zip(p, q):
        if pi == 0.0:
            continue
        total += pi * (math.log(pi) - math.log(qi))
    return total


# --------------------------------------------------------------------------
# losses, one loop nest per objective
# --------------------------------------------------------------------------


def naive_ce(logits_list, labels):
    labels = [int(v) for v in np.asarray(labels).tolist()]
    total = 0.0
    for logits in logits_list:
        rows = np.asarray(logits).tolist()
        acc = 0.0
        for row, y in zip(rows, labels):
            top = max(row)
            lse = top + math.log(sum(math.exp(v - top) for v in row))
            acc += lse - row[y]
        total += acc / len(rows)
    return total


def naive_kl_pairwise(logits_list, temperature):
    count = len(logits_list)
    if count < 2:
        return 0.0
    soft = [naive_softmax(a, temperature) for a in logits_list]
    batch = len(soft[0])
    total = 0.0
    for i in range(count):
        for j in range(count):
            if i == j:
                continue
            acc = 0.0
            for b in range(batch):
                acc += _kl(soft[i][b], soft[j][b])
            total += acc / batch
    return total / (count - 1)


def _pool_sample(fmap, factor):
    """Average-pool one (C, H, W) nested list by an integer factor."""
    out = []
    for chan in fmap:
        h, w = len(chan) // factor, len(chan[0]) // factor
        rows = []
        for r in range(h):
            row = []
            for c in range(w):
                acc = 0.0
                for i in range(factor):
                    for j in range(factor):
                        acc += chan[r * factor + i][c * factor + j]
                row.append(acc / (factor * factor))
            rows.append(row)
        out.append(rows)
    return out


def naive_similarity_map(f):
    """(B, C, H, W) -> list of B nested N x N lists."""
    f = np.asarray(f).tolist()
    maps = []
    for sample in f:
        C = len(sample)
        H, W = len(sample[0]), len(sample[0][0])
        vecs = []
        for r in range(H):
            for c in range(W):
                vecs.append([sample[ch][r][c] for ch in range(C)])
        norms = [math.sqrt(sum(v * v for v in vec)) for vec in vecs]
        n = len(vecs)
        s = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(n):
                dot = 0.0
                for a, b in zip(vecs[i], vecs[j]):
                    dot += a * b
                s[i][j] = dot / max(norms[i] * norms[j], 1e-12)
        maps.append(s)
    return maps


def _aligned_maps(features):
    feats = [np.asarray(f).tolist() for f in features]
    h = min(len(f[0][0]) for f in feats)
    maps = []
    for f in feats:
        factor = len(f[0][0]) // h
        if factor > 1:
            f = [_pool_sample(sample, factor) for sample in f]
        maps.append(naive_similarity_map(f))
    return maps


def _sq_frobenius_mean(sa, sb):
    batch = len(sa)
    n = len(sa[0])
    acc = 0.0
    for b in range(batch):
        for i in range(n):
            for j in range(n):
                diff = sa[b][i][j] - sb[b][i][j]
                acc += diff * diff
    return acc / batch / (n * n)


def naive_similarity_maps(features):
    """Similarity maps of every feature map after pooling onto the smallest grid."""
    return _aligned_maps(features)


def naive_l2_simmaps(features, targets=None):
    """Shallow-to-deep similarity-map distance.

    ``targets`` (maps from :func:`naive_similarity_maps`) stand in for the
    deeper map of every pair. Holding them fixed while perturbing parameters
    gives finite differences of the stop-gradient objective.
    """
    maps = _aligned_maps(features)
    deeper = maps if targets is None else targets
    count = len(maps)
    total = 0.0
    for i in range(count - 1):
        inner = 0.0
        for j in range(i + 1, count):
            inner += _sq_frobenius_mean(maps[i], deeper[j])
        total += inner / (count - 1 - i)
    return total


def naive_real_mix(probs, y_onehot, mu_r):
    probs = [np.asarray(p).tolist() for p in probs]
    y = np.asarray(y_onehot).tolist()
    count = len(probs)
    out = []
    for b in range(len(y)):
        row = []
        for c in range(len(y[b])):
            acc = 0.0
            for p in probs:
                acc += p[b][c]
            row.append(mu_r / count * acc + (1.0 - mu_r) * y[b][c])
        out.append(row)
    return out


# --------------------------------------------------------------------------
# critic, evaluated one sample at a time
# --------------------------------------------------------------------------


def _critic_layers(d):
    layers = []
    for blk in d.blocks:
        layers.append(
            (
                blk.linear.weight.data.tolist(),
                blk.linear.bias.data.tolist(),
                blk.norm.weight.data.tolist(),
                blk.norm.bias.data.tolist(),
                blk.norm.eps,
                blk.slope,
            )
        )
    final = (d.out.weight.data.tolist()[0], float(d.out.bias.data[0]))
    return layers, final


def _critic_input(d, p_row, image):
    img = np.asarray(image).tolist()
    if d.cond_pool > 1:
        img = _pool_sample(img, d.cond_pool)
    flat = []
    for chan in img:
        for row in chan:
            flat.extend(row)
    return list(p_row) + flat


def _critic_sample(layers, final, x):
    """Forward one input vector; returns score and per-layer caches."""
    caches = []
    h = x
    for w, b, g, beta, eps, slope in layers:
        z = []
        for r in range(len(w)):
            acc = b[r]
            for wi, hi in zip(w[r], h):
                acc += wi * hi
            z.append(acc)
        mu = sum(z) / len(z)
        var = sum((v - mu) ** 2 for v in z) / len(z)
        inv = 1.0 / math.sqrt(var + eps)
        zhat = [(v - mu) * inv for v in z]
        n = [zh * gi + bi for zh, gi, bi in zip(zhat, g, beta)]
        a = [v if v > 0 else slope * v for v in n]
        caches.append((w, g, zhat, inv, n, slope))
        h = a
    wf, bf = final
    score = bf
    for wi, hi in zip(wf, h):
        score += wi * hi
    return score, caches


def naive_disc_score(d, p_row, image, _layers=None):
    layers, final = _layers or _critic_layers(d)
    return _critic_sample(layers, final, _critic_input(d, p_row, image))[0]


def naive_disc_input_grad(d, p_row, image, _layers=None):
    """Hand-unrolled chain rule for one sample; returns d score / d p."""
    layers, final = _layers or _critic_layers(d)
    x = _critic_input(d, p_row, image)
    _, caches = _critic_sample(layers, final, x)
    g = list(final[0])
    for w, gain, zhat, inv, n, slope in reversed(caches):
        gn = [gi * (1.0 if ni > 0 else slope) for gi, ni in zip(g, n)]
        gzh = [a * b for a, b in zip(gn, gain)]
        m1 = sum(gzh) / len(gzh)
        m2 = sum(a * b for a, b in zip(gzh, zhat)) / len(gzh)
        gz = [inv * (a - m1 - zh * m2) for a, zh in zip(gzh, zhat)]
        cols = len(w[0])
        g = [0.0] * cols
        for r in range(len(w)):
            for c in range(cols):
                g[c] += gz[r] * w[r][c]
    return g[: d.classes]


def naive_disc_loss(d, probs, r, images, lambda_gp, eps):
    cached = _critic_layers(d)
    probs = [np.asarray(p).tolist() for p in probs]
    r = np.asarray(r).tolist()
    images = np.asarray(images)
    eps = np.asarray(eps).tolist()
    count = len(probs)
    batch = len(r)
    total = 0.0
    for p in probs:
        fake = sum(naive_disc_score(d, p[b], images[b], cached) for b in range(batch)) / batch
        real = sum(naive_disc_score(d, r[b], images[b], cached) for b in range(batch)) / batch
        total += (fake - real) / count
    penalty = 0.0
    for p in probs:
        acc = 0.0
        for b in range(batch):
            p_hat = [eps[b] * rv + (1.0 - eps[b]) * pv for rv, pv in zip(r[b], p[b])]
            g = naive_disc_input_grad(d, p_hat, images[b], cached)
            acc += (math.sqrt(sum(v * v for v in g)) - 1.0) ** 2
        penalty += acc / batch
    return total + lambda_gp / count * penalty


def naive_gen_loss(d, probs, images):
    cached = _critic_layers(d)
    probs = [np.asarray(p).tolist() for p in probs]
    images = np.asarray(images)
    total = 0.0
    for p in probs:
        total += sum(naive_disc_score(d, p[b], images[b], cached) for b in range(len(p))) / len(p)
    return -total / len(probs)


def naive_sd_total(ce, kl, l2, w, alpha, beta, gamma):
    return (1.0 - alpha) * ce + alpha * kl + beta * l2 + gamma * w


def naive_kd_total(
    teacher_logits, teacher_feats, student_logits, student_feats, weights, d=None, images=None, pairing="matched"
):
    """Returns (total, kl, l2, w) for the teacher-student objective."""
    every = pairing == "all"
    count = len(student_logits)
    temp = weights.temperature
    t_soft = [naive_softmax(a, temp) for a in teacher_logits]
    s_soft = [naive_softmax(a, temp) for a in student_logits]
    batch = len(s_soft[0])
    kl = 0.0
    pairs = 0
    for i in range(count):
        for j in range(count):
            if every or i == j:
                kl += sum(_kl(t_soft[j][b], s_soft[i][b]) for b in range(batch)) / batch
                pairs += 1
    kl /= pairs
    maps = _aligned_maps(list(student_feats) + list(teacher_feats))
    s_maps, t_maps = maps[:count], maps[count:]
    l2 = 0.0
    for i in range(count):
        targets = range(i, count) if every else [i]
        inner = 0.0
        for j in targets:
            inner += _sq_frobenius_mean(s_maps[i], t_maps[j])
        l2 += inner / len(targets)
    w = 0.0
    if d is not None and images is not None:
        probs = [naive_softmax(a) for a in student_logits]
        w = naive_gen_loss(d, probs, images)
    total = weights.lambda1 * kl + weights.lambda2 * l2 + weights.lambda3 * w
    return total, kl, l2, w


# --------------------------------------------------------------------------
# synthetic-data reference classifier
# --------------------------------------------------------------------------


def nearest_mean_predict(train_images, train_labels, test_images):
    train = np.asarray(train_images, dtype=np.float64).reshape(len(train_images), -1)
    test = np.asarray(test_images, dtype=np.float64).reshape(len(test_images), -1)
    labels = np.asarray(train_labels)
    classes = sorted(set(labels.tolist()))
    means = {}
    for c in classes:
        rows = train[labels == c]
        means[c] = [sum(col) / len(rows) for col in rows.T.tolist()]
    preds = []
    for x in test.tolist():
        best, best_d = None, math.inf
        for c in classes:
            dist = sum((a - b) ** 2 for a, b in zip(x, means[c]))
            if dist < best_d:
                best, best_d = c, dist
        preds.append(best)
    return np.array(preds)
