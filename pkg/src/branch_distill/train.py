"""Optimizer, schedule, the alternating adversarial loop, evaluation and run management."""

import contextlib
import csv
import datetime as _dt
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ck
from .autodiff import Tensor
from .data import augment, iterate_batches, load_dataset, pipelines
from .errors import ConfigError, ContractError, DataError, NumericFault
from .losses import (
    KD_PAIRINGS,
    LossWeights,
    loss_ce,
    loss_discriminator_wgangp,
    loss_generator_w,
    loss_kd_total,
    loss_kl_pairwise,
    loss_l2_simmaps,
    loss_sd_total,
    one_hot,
    real_mix,
    softmax_probs,
)
from .nn import ArchSpec, BranchedModel, Discriminator, resolve_arch

CRITIC_HIDDEN = (128, 128)
CRITIC_COND_BUDGET = 256

# RNG stream ids; every generator is default_rng([seed, stream, ...])
STREAM_MODEL, STREAM_CRITIC, STREAM_SHUFFLE, STREAM_EPS, STREAM_AUG, STREAM_KD_CRITIC, STREAM_KD_EPS = range(7)


def stream(seed, *keys):
    return np.random.default_rng([int(seed), *keys])


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------


def cosine_lr(t, total, lr0):
    """lr0 * (1 + cos(pi t / total)) / 2 for 0 <= t <= total."""
    if total <= 0:
        raise ContractError(f"schedule length must be positive, got {total}")
    if not 0 <= t <= total:
        raise ContractError(f"epoch {t} outside schedule [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    velocity: List[np.ndarray]
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4


def sgd_step(params, grads, state):
    """v <- m v + (g + wd p); p <- p - lr v. Parameters without a gradient are skipped."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            if ad.is_strict():
                raise ContractError(f"parameter {p.name or i} has no gradient")
            continue
        v = state.velocity[i]
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= state.lr * v


class SGD:
    def __init__(self, named_params, lr=0.1, momentum=0.9, weight_decay=5e-4):
        self.names, self.params = [], []
        for name, p in named_params:
            self.names.append(name)
            self.params.append(p)
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params], lr, momentum, weight_decay)

    def step(self):
        sgd_step(self.params, [p.grad for p in self.params], self.state)
        for p in self.params:
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_records(self, prefix):
        return {f"{prefix}/{n}": v for n, v in zip(self.names, self.state.velocity)}

    def load_records(self, ckpt, prefix):
        for n, v in zip(self.names, self.state.velocity):
            key = f"{prefix}/{n}"
            if key in ckpt.tensors:
                v[...] = ckpt.tensors[key]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    seed: Optional[int] = None
    arch: str = "tiny-resnet"
    branches: Optional[int] = None
    classes: Optional[int] = None
    dataset: str = "synth"
    data_root: Optional[str] = None
    epochs: int = 200
    batch_size: int = 128
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    weights: LossWeights = field(default_factory=LossWeights)
    critic_steps: int = 1
    critic_lr_scale: float = 0.1
    eval_every: int = 1
    checkpoint_dir: str = "runs/default"
    kl_detach_target: bool = False
    kd_pairing: str = "matched"
    precision: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("epochs", "batch_size", "critic_steps", "eval_every"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        if self.branches is not None and self.branches < 0:
            raise ConfigError(f"branches must be >= 0, got {self.branches}")
        if self.classes is not None and self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if not (math.isfinite(self.lr0) and self.lr0 >= 0):
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (math.isfinite(self.critic_lr_scale) and self.critic_lr_scale > 0):
            raise ConfigError(f"critic_lr_scale must be > 0, got {self.critic_lr_scale}")
        if not (math.isfinite(self.weight_decay) and self.weight_decay >= 0):
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.kd_pairing not in KD_PAIRINGS:
            raise ConfigError(f"kd_pairing must be one of {KD_PAIRINGS}, got {self.kd_pairing!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.seed is not None and not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must fit in 64 unsigned bits, got {self.seed}")
        self.weights.validate()
        return self

    def flat(self):
        """Flat key -> value view matching the config-file keys."""
        out = {}
        for f in fields(self):
            if f.name == "weights":
                out.update(asdict(self.weights))
            else:
                out[f.name] = getattr(self, f.name)
        return out


@contextlib.contextmanager
def _precision(name):
    old = ad.get_default_dtype()
    ad.set_default_dtype(PRECISIONS[name])
    try:
        yield PRECISIONS[name]
    finally:
        ad.set_default_dtype(old)


# --------------------------------------------------------------------------
# one step
# --------------------------------------------------------------------------


class StepMetrics(NamedTuple):
    loss_ce: float
    loss_kl: float
    loss_l2: float
    loss_w: float
    loss_d: float
    loss_total: float
    kd_kl: float = 0.0
    kd_l2: float = 0.0
    kd_w: float = 0.0
    kd_d: float = 0.0


def _finite(value, component):
    v = float(value.data) if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericFault(component, f"value {v}")
    return v


def critic_pool(image_shape, budget=CRITIC_COND_BUDGET):
    """Smallest power-of-two pooling that brings the flattened image under ``budget``."""
    c, h, w = image_shape
    p = 1
    while c * (h // p) * (w // p) > budget and h % (2 * p) == 0 and w % (2 * p) == 0:
        p *= 2
    return p


def build_critic(classes, image_shape, rng):
    return Discriminator(classes, image_shape, rng, hidden=CRITIC_HIDDEN, cond_pool=critic_pool(image_shape))


@dataclass
class StepContext:
    """Everything a step needs besides the batch: optimizers and random streams."""

    weights: LossWeights
    gen_opt: SGD
    critic_opt: SGD
    eps_rng: np.random.Generator
    critic_steps: int = 1
    critic_lr_scale: float = 1.0
    kl_detach_target: bool = False
    teacher: Optional[BranchedModel] = None
    kd_critic: Optional[Discriminator] = None
    kd_opt: Optional[SGD] = None
    kd_eps_rng: Optional[np.random.Generator] = None
    kd_pairing: str = "matched"

    def set_lr(self, lr):
        """Generator rate ``lr``; both critics run at ``lr * critic_lr_scale``."""
        self.gen_opt.state.lr = lr
        for opt in (self.critic_opt, self.kd_opt):
            if opt is not None:
                opt.state.lr = lr * self.critic_lr_scale


def _critic_update(d, opt, probs, r, x, lambda_gp, rng, steps, name):
    value = 0.0
    for _ in range(steps):
        eps = rng.random(r.shape[0]).astype(r.dtype)
        opt.zero_grad()
        ld = loss_discriminator_wgangp(d, probs, r, x, lambda_gp, eps)
        value = _finite(ld, name)
        ad.backward(ld)
        opt.step()
    return value


def train_step(model, d, batch, labels, ctx):
    """Critic update(s) on detached outputs, then one generator update on the total objective."""
    w = ctx.weights
    ad.clear_tape()
    x = ad.as_tensor(batch)
    out = model.forward_all(x)
    probs = [softmax_probs(a) for a in out.logits]
    frozen_probs = [ad.detach(p) for p in probs]
    y = one_hot(labels, probs[0].shape[1], dtype=x.dtype)

    r = real_mix(frozen_probs, y, w.mu_r)
    loss_d = _critic_update(d, ctx.critic_opt, frozen_probs, r, x, w.lambda_gp, ctx.eps_rng, ctx.critic_steps, "loss_d")

    kd = None
    kd_d = 0.0
    if ctx.teacher is not None:
        with ad.no_grad():
            t_out = ctx.teacher.forward_all(x)
        t_probs = [softmax_probs(a) for a in t_out.logits]
        r_kd = real_mix(t_probs, y, w.mu_r)
        kd_d = _critic_update(
            ctx.kd_critic, ctx.kd_opt, frozen_probs, r_kd, x, w.lambda_gp, ctx.kd_eps_rng, ctx.critic_steps, "loss_kd_d"
        )
        kd = loss_kd_total(t_out, out, w, ctx.kd_critic if w.lambda3 > 0 else None, x, pairing=ctx.kd_pairing)

    ce = loss_ce(out, labels)
    kl = loss_kl_pairwise(out, w.temperature, detach_target=ctx.kl_detach_target)
    l2 = loss_l2_simmaps(out)
    lw = loss_generator_w(d, probs, x) if w.gamma > 0 else Tensor(0.0)
    total = loss_sd_total(ce, kl, l2, lw, w)
    if kd is not None:
        for name, value in (("loss_kd_kl", kd.kl), ("loss_kd_l2", kd.l2), ("loss_kd_w", kd.w)):
            _finite(value, name)
        total = total + kd.total
    total_v = _finite(total, "loss_total")
    ctx.gen_opt.zero_grad()
    ad.backward(total)
    ctx.gen_opt.step()
    ad.clear_tape()
    extra = (float(kd.kl.data), float(kd.l2.data), float(kd.w.data), kd_d) if kd is not None else ()
    return StepMetrics(
        float(ce.data), float(kl.data), float(l2.data), float(lw.data), loss_d, total_v, *extra
    )


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


class EvalResult(NamedTuple):
    per_classifier: List[float]
    ensemble: float


def evaluate(model, split, policy=None, batch_size=100):
    """Top-1 accuracy (fraction) of every classifier and of the mean-softmax ensemble."""
    n = len(split)
    if n == 0:
        raise ContractError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    correct = np.zeros(model.num_classifiers, dtype=np.int64)
    ens_correct = 0
    try:
        with ad.no_grad():
            for idx in iterate_batches(n, batch_size):
                x = split.float_images(idx, ad.get_default_dtype())
                if policy is not None:
                    x = augment(x, policy)
                y = split.labels[idx]
                out = model.forward_all(Tensor(x))
                mean_p = 0.0
                for k, a in enumerate(out.logits):
                    correct[k] += int(np.sum(np.argmax(a.data, axis=1) == y))
                    mean_p = mean_p + softmax_probs(a).data
                ens_correct += int(np.sum(np.argmax(mean_p, axis=1) == y))
    finally:
        model.train(was_training)
        ad.clear_tape()
    return EvalResult([c / n for c in correct.tolist()], ens_correct / n)


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    best_acc: List[float]
    best_ensemble: float
    best_epoch: List[int]
    final_acc: List[float]
    final_ensemble: float
    run_dir: Path
    csv_path: Path
    manifest_path: Path
    rows: List[dict] = field(default_factory=list)

    @property
    def entries(self):
        """K+1 best per-classifier accuracies followed by the best ensemble accuracy."""
        return list(self.best_acc) + [self.best_ensemble]


def metrics_header(k_plus_1, kd=False):
    cols = ["epoch", "lr", "loss_ce", "loss_kl", "loss_l2", "loss_w", "loss_d"]
    cols += [f"acc_c{k}" for k in range(1, k_plus_1 + 1)] + ["acc_ensemble"]
    if kd:
        cols += ["loss_kd_kl", "loss_kd_l2", "loss_kd_w", "loss_kd_d"]
    return cols


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def _utc_now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _code_version():
    from . import __version__

    return __version__


@dataclass
class RunManifest:
    """What a run was: resolved config, code version, data fingerprint, timing and outputs."""

    config: dict
    code_version: str
    dataset_sha256: str
    started: str
    ended: Optional[str]
    outputs: dict

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"{path}: cannot read manifest ({exc.strerror or exc})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: manifest is not valid JSON ({exc})") from exc
        return cls(**{f.name: doc.get(f.name) for f in fields(cls)})


def write_manifest(path, cfg, dataset_sha, started, ended, outputs):
    m = RunManifest(cfg.flat(), _code_version(), dataset_sha, started, ended, {k: str(v) for k, v in outputs.items()})
    try:
        Path(path).write_text(m.to_json())
    except OSError as exc:
        raise DataError(f"{path}: cannot write manifest ({exc.strerror or exc})") from exc
    return m


class _Run:
    """Shared state of one training run (plain or teacher-student)."""

    def __init__(self, cfg, teacher=None):
        if cfg.seed is None:
            raise ConfigError("seed is required")
        self.cfg = cfg
        self.train_set, self.test_set = load_dataset(cfg.dataset, cfg.data_root, classes=cfg.classes)
        classes = self.train_set.class_count
        if cfg.classes is not None and cfg.classes != classes:
            raise ConfigError(f"config says {cfg.classes} classes, dataset {cfg.dataset!r} has {classes}")
        c, h, wd = self.train_set.image_shape
        self.arch = resolve_arch(cfg.arch, in_channels=c, image_size=(h, wd), classes=classes, k_branches=cfg.branches)
        seed = int(cfg.seed)
        self.model = BranchedModel(self.arch, stream(seed, STREAM_MODEL))
        self.critic = build_critic(classes, (c, h, wd), stream(seed, STREAM_CRITIC))
        opt = dict(lr=cfg.lr0, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.ctx = StepContext(
            weights=cfg.weights,
            gen_opt=SGD(self.model.named_parameters(), **opt),
            critic_opt=SGD(self.critic.named_parameters(), **opt),
            eps_rng=stream(seed, STREAM_EPS),
            critic_steps=cfg.critic_steps,
            critic_lr_scale=cfg.critic_lr_scale,
            kl_detach_target=cfg.kl_detach_target,
        )
        if teacher is not None:
            if teacher.num_classifiers != self.model.num_classifiers:
                raise ConfigError(
                    f"teacher has {teacher.num_classifiers} classifiers, student has {self.model.num_classifiers}"
                )
            if teacher.arch.classes != classes or teacher.input_shape != self.model.input_shape:
                raise ConfigError("teacher and student disagree on classes or input shape")
            teacher.eval()
            for p in teacher.parameters():
                p.requires_grad = False
            self.ctx.teacher = teacher
            self.ctx.kd_critic = build_critic(classes, (c, h, wd), stream(seed, STREAM_KD_CRITIC))
            self.ctx.kd_opt = SGD(self.ctx.kd_critic.named_parameters(), **opt)
            self.ctx.kd_eps_rng = stream(seed, STREAM_KD_EPS)
            self.ctx.kd_pairing = cfg.kd_pairing
        self.train_policy, self.eval_policy = pipelines(self.train_set)
        self.run_dir = Path(cfg.checkpoint_dir)
        self.dataset_sha = hashlib.sha256(
            (self.train_set.checksum() + self.test_set.checksum()).encode()
        ).hexdigest()

    def checkpoint(self, epoch):
        desc = {"arch": json.loads(self.arch.to_json()), "critic": {
            "hidden": list(CRITIC_HIDDEN), "cond_pool": self.critic.cond_pool,
        }}
        tensors = {}
        tensors.update(ck.module_state(self.model, "model"))
        tensors.update(ck.module_state(self.critic, "critic"))
        tensors.update(self.ctx.gen_opt.state_records("opt/model"))
        tensors.update(self.ctx.critic_opt.state_records("opt/critic"))
        return ck.Checkpoint(arch=desc, tensors=tensors, epoch=epoch, rng_state=self.ctx.eps_rng.bit_generator.state)

    def batch(self, epoch, b, idx):
        x = self.train_set.float_images(idx, ad.get_default_dtype())
        x = augment(x, self.train_policy, stream(self.cfg.seed, STREAM_AUG, epoch, b))
        return x, self.train_set.labels[idx]

    def run(self):
        cfg = self.cfg
        kd = self.ctx.teacher is not None
        k1 = self.model.num_classifiers
        try:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"{self.run_dir}: cannot create run directory ({exc.strerror or exc})") from exc
        csv_path = self.run_dir / "metrics.csv"
        manifest_path = self.run_dir / "manifest.json"
        outputs = {"metrics": csv_path, "final": self.run_dir / "final.ckpt"}
        outputs.update({f"best_c{k}": self.run_dir / f"best_c{k}.ckpt" for k in range(1, k1 + 1)})
        started = _utc_now()
        write_manifest(manifest_path, cfg, self.dataset_sha, started, None, outputs)

        header = metrics_header(k1, kd)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        best = [-1.0] * k1
        best_epoch = [0] * k1
        best_ens = -1.0
        rows = []
        last = None
        self.model.train()
        self.critic.train()
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
            self.ctx.set_lr(lr)
            sums = np.zeros(len(StepMetrics._fields))
            steps = 0
            order = iterate_batches(len(self.train_set), cfg.batch_size, stream(cfg.seed, STREAM_SHUFFLE, epoch))
            for b, idx in enumerate(order):
                x, y = self.batch(epoch, b, idx)
                sums += np.asarray(train_step(self.model, self.critic, x, y, self.ctx), dtype=np.float64)
                steps += 1
            means = dict(zip(StepMetrics._fields, (sums / steps).tolist()))
            acc = [None] * k1
            ens = None
            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                res = evaluate(self.model, self.test_set, self.eval_policy)
                acc, ens, last = res.per_classifier, res.ensemble, res
                snap = None
                for k in range(k1):
                    if acc[k] > best[k]:
                        best[k], best_epoch[k] = acc[k], epoch + 1
                        snap = snap or self.checkpoint(epoch + 1)
                        ck.save_checkpoint(snap, self.run_dir / f"best_c{k + 1}.ckpt")
                best_ens = max(best_ens, ens)
            row = {"epoch": epoch + 1, "lr": lr}
            row.update({k: means[k] for k in ("loss_ce", "loss_kl", "loss_l2", "loss_w", "loss_d")})
            row.update({f"acc_c{k + 1}": acc[k] for k in range(k1)})
            row["acc_ensemble"] = ens
            if kd:
                row.update({f"loss_{k}": means[k] for k in ("kd_kl", "kd_l2", "kd_w", "kd_d")})
            rows.append(row)
            writer.writerow([str(row["epoch"])] + [_fmt(row[c]) for c in header[1:]])
        try:
            csv_path.write_text(buf.getvalue())
        except OSError as exc:
            raise DataError(f"{csv_path}: cannot write metrics ({exc.strerror or exc})") from exc
        ck.save_checkpoint(self.checkpoint(cfg.epochs), outputs["final"])
        write_manifest(manifest_path, cfg, self.dataset_sha, started, _utc_now(), outputs)
        return RunReport(
            best_acc=best, best_ensemble=best_ens, best_epoch=best_epoch,
            final_acc=list(last.per_classifier), final_ensemble=last.ensemble,
            run_dir=self.run_dir, csv_path=csv_path, manifest_path=manifest_path, rows=rows,
        )


def train_run(cfg):
    """Train a branched model under the self-distillation objective and record the run."""
    cfg.validate()
    with _precision(cfg.precision):
        return _Run(cfg).run()


def restore_model(ckpt):
    """Rebuild the branched classifier stored in a checkpoint."""
    arch = ArchSpec.from_json(json.dumps(ckpt.arch["arch"]))
    model = BranchedModel(arch, np.random.default_rng(0))
    return ck.load_module_state(model, ckpt, "model")


def train_teacher_student(teacher_ckpt, cfg):
    """Train a fresh branched student against a frozen branched teacher."""
    cfg.validate()
    with _precision(cfg.precision):
        ckpt = teacher_ckpt if isinstance(teacher_ckpt, ck.Checkpoint) else ck.load_checkpoint(teacher_ckpt)
        if "arch" not in ckpt.arch:
            raise ConfigError("teacher checkpoint carries no architecture descriptor")
        teacher = restore_model(ckpt)
        return _Run(cfg, teacher=teacher).run()
