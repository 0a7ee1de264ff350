import csv
import dataclasses
import hashlib
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from branch_distill import autodiff as ad
from branch_distill import checkpoint as ck
from branch_distill.autodiff import Tensor
from branch_distill.data import Dataset, synth_blobs
from branch_distill.errors import ConfigError, ContractError, DataError
from branch_distill.losses import LossWeights, loss_ce, loss_discriminator_wgangp, loss_kd_total, one_hot, real_mix
from branch_distill.nn import BranchOutputs
from branch_distill.train import (
    SGD,
    OptimizerState,
    StepContext,
    TrainConfig,
    _Run,
    cosine_lr,
    critic_pool,
    evaluate,
    metrics_header,
    restore_model,
    sgd_step,
    train_run,
    train_step,
    train_teacher_student,
)

from conftest import tiny_critic, tiny_model

CE_ONLY = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)


def make_ctx(model, d, weights=None, lr=0.01, seed=0, critic_steps=1, momentum=0.9, wd=5e-4):
    return StepContext(
        weights=weights or LossWeights(),
        gen_opt=SGD(model.named_parameters(), lr, momentum, wd),
        critic_opt=SGD(d.named_parameters(), lr, momentum, wd),
        eps_rng=np.random.default_rng(seed),
        critic_steps=critic_steps,
    )


def snapshot(module):
    return [p.data.copy() for p in module.parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def batch(seed=0, n=4):
    r = np.random.default_rng(seed)
    return r.standard_normal((n, 2, 8, 8)), r.integers(0, 4, n)


def smoke_config(tmp_path, name="run", **kw):
    base = dict(seed=3, dataset="synth:256", epochs=2, batch_size=64, checkpoint_dir=str(tmp_path / name))
    base.update(kw)
    return TrainConfig(**base)


# -- schedule and optimizer ----------------------------------------------------------


def test_cosine_examples():
    assert cosine_lr(0, 200, 0.1) == 0.1
    assert abs(cosine_lr(200, 200, 0.1)) <= 1e-18
    assert abs(cosine_lr(100, 200, 0.1) - 0.05) <= 1e-15


def test_cosine_monotone():
    values = [cosine_lr(t, 37, 0.2) for t in range(38)]
    assert all(a >= b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("t", [-1, 201])
def test_cosine_out_of_range(t):
    with pytest.raises(ContractError):
        cosine_lr(t, 200, 0.1)


def test_sgd_vanilla_step():
    p = ad.parameter(np.array([0.0]))
    sgd_step([p], [np.array([1.0])], OptimizerState([np.zeros(1)], lr=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data.tolist() == [-0.1]


def test_sgd_momentum_recurrence():
    p = ad.parameter(np.array([0.0]))
    state = OptimizerState([np.zeros(1)], lr=1.0, momentum=0.9, weight_decay=0.0)
    sgd_step([p], [np.array([1.0])], state)
    assert p.data.tolist() == [-1.0]
    sgd_step([p], [np.array([1.0])], state)
    assert abs(p.data[0] + 2.9) <= 1e-15


def test_sgd_weight_decay_pulls_to_zero():
    p = ad.parameter(np.array([2.0, -3.0]))
    sgd_step([p], [np.zeros(2)], OptimizerState([np.zeros(2)], lr=0.1, momentum=0.0, weight_decay=5e-4))
    assert 0 < p.data[0] < 2.0 and -3.0 < p.data[1] < 0


def test_sgd_missing_grad():
    p = ad.parameter(np.array([1.0]))
    state = OptimizerState([np.zeros(1)])
    sgd_step([p], [None], state)
    assert p.data.tolist() == [1.0]
    with ad.strict(), pytest.raises(ContractError):
        sgd_step([p], [None], state)


def test_sgd_class_zeroes_grads():
    p = ad.parameter(np.array([1.0]), name="w")
    opt = SGD([("w", p)], lr=0.5, momentum=0.0, weight_decay=0.0)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data.tolist() == [0.0] and p.grad is None
    assert list(opt.state_records("opt")) == ["opt/w"]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(critic_steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(precision="float16")
    with pytest.raises(ConfigError):
        TrainConfig(kd_pairing="diagonal")
    assert "alpha" in TrainConfig().flat() and "weights" not in TrainConfig().flat()


def test_critic_pool():
    assert critic_pool((1, 28, 28)) == 2
    assert critic_pool((3, 32, 32)) == 4
    assert critic_pool((1, 8, 8)) == 1


# -- one step --------------------------------------------------------------------


def test_step_updates_are_separated():
    model, d = tiny_model(0), tiny_critic()
    ctx = make_ctx(model, d)
    x, y = batch()
    gen0, critic0 = snapshot(model), snapshot(d)
    seen = {}
    critic_step = ctx.critic_opt.step

    def spy():
        critic_step()
        seen["gen_after_critic"] = snapshot(model)
        seen["critic_after_critic"] = snapshot(d)

    ctx.critic_opt.step = spy
    m = train_step(model, d, x, y, ctx)
    assert same(seen["gen_after_critic"], gen0)
    assert not same(seen["critic_after_critic"], critic0)
    assert same(snapshot(d), seen["critic_after_critic"])
    assert not same(snapshot(model), gen0)
    assert all(np.isfinite(v) for v in m)


def test_gamma_zero_skips_generator_critic_graph():
    x, y = batch()
    calls = {}
    for gamma in (0.0, 0.1):
        model, d = tiny_model(0), tiny_critic()
        ctx = make_ctx(model, d, LossWeights(gamma=gamma))
        before = snapshot(d)
        d.forward_calls = 0
        m = train_step(model, d, x, y, ctx)
        calls[gamma] = d.forward_calls
        assert not same(snapshot(d), before)
    # count what one critic loss alone costs
    d = tiny_critic()
    d.forward_calls = 0
    probs = [Tensor(np.full((4, 4), 0.25))]
    loss_discriminator_wgangp(d, probs, real_mix(probs, one_hot(y, 4), 0.5), x, 10.0, np.ones(4))
    assert calls[0.0] == d.forward_calls
    assert calls[0.1] > calls[0.0]
    assert m.loss_w != 0.0


def test_critic_steps_honoured():
    x, y = batch()
    counts = []
    for steps in (1, 3):
        model, d = tiny_model(0), tiny_critic()
        ctx = make_ctx(model, d, LossWeights(gamma=0.0), critic_steps=steps)
        d.forward_calls = 0
        train_step(model, d, x, y, ctx)
        counts.append(d.forward_calls)
    assert counts[1] == 3 * counts[0]


def test_step_deterministic_in_process():
    x, y = batch()
    results = []
    for _ in range(2):
        model, d = tiny_model(5), tiny_critic(6)
        ctx = make_ctx(model, d, seed=7)
        ms = [train_step(model, d, x, y, ctx) for _ in range(2)]
        results.append((ms, snapshot(model), snapshot(d)))
    assert results[0][0] == results[1][0]
    assert same(results[0][1], results[1][1]) and same(results[0][2], results[1][2])


STEP_SCRIPT = textwrap.dedent(
    """
    import hashlib, numpy as np
    import sys; sys.path.insert(0, {tests!r})
    from conftest import tiny_model, tiny_critic
    from test_train import make_ctx, batch
    from branch_distill.train import train_step
    model, d = tiny_model(5), tiny_critic(6)
    ctx = make_ctx(model, d, seed=7)
    x, y = batch()
    m = train_step(model, d, x, y, ctx)
    h = hashlib.sha256(repr(tuple(m)).encode())
    for p in list(model.parameters()) + list(d.parameters()):
        h.update(p.data.tobytes())
    print(h.hexdigest())
    """
)


def test_step_deterministic_across_processes():
    from pathlib import Path

    script = STEP_SCRIPT.format(tests=str(Path(__file__).parent))
    outs = [subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] and len(outs[0].strip()) == 64


@pytest.mark.parametrize("seed", range(20))
def test_ce_step_descends(seed):
    model, d = tiny_model(seed), tiny_critic(seed + 100)
    x, y = batch(seed)
    ctx = make_ctx(model, d, CE_ONLY, lr=1e-3, wd=0.0)
    before = train_step(model, d, x, y, ctx).loss_ce
    after = float(loss_ce(model.forward_all(Tensor(x)), y).data)
    assert after <= before


def test_kd_step_reports_components():
    model, d = tiny_model(0), tiny_critic()
    teacher = tiny_model(9)
    teacher.eval()
    ctx = make_ctx(model, d)
    ctx.teacher, ctx.kd_critic = teacher, tiny_critic(11)
    ctx.kd_opt = SGD(ctx.kd_critic.named_parameters(), 0.01, 0.9, 5e-4)
    ctx.kd_eps_rng = np.random.default_rng(1)
    teacher0 = snapshot(teacher)
    m = train_step(model, d, *batch(), ctx)
    assert m.kd_kl > 0 and m.kd_l2 > 0 and m.kd_d != 0.0
    assert same(snapshot(teacher), teacher0)


# -- evaluation --------------------------------------------------------------------


class _Fixed:
    """Stand-in classifier returning preset logits."""

    def __init__(self, logits_fn, count):
        self.logits_fn, self.num_classifiers, self.training = logits_fn, count, True

    def eval(self):
        self.training = False

    def train(self, flag=True):
        self.training = flag

    def forward_all(self, x):
        logits = [Tensor(a) for a in self.logits_fn(x.data)]
        return BranchOutputs(logits, [None] * len(logits))


def _split(labels):
    labels = np.asarray(labels)
    return Dataset(np.zeros((len(labels), 1, 2, 2)), labels, 10)


def test_evaluate_uniform_predictions():
    # uniform logits make argmax pick class 0
    split = _split(np.arange(250) % 10)
    model = _Fixed(lambda x: [np.zeros((len(x), 10))] * 3, 3)
    res = evaluate(model, split)
    assert res.per_classifier == [0.1, 0.1, 0.1] and res.ensemble == 0.1
    assert model.training


def test_evaluate_identical_classifiers_equal_ensemble(rng):
    table = rng.standard_normal((40, 10))
    split = Dataset(np.arange(40, dtype=np.float64).reshape(40, 1, 1, 1), rng.integers(0, 10, 40), 10)
    model = _Fixed(lambda x: [table[x[:, 0, 0, 0].astype(int)]] * 3, 3)
    res = evaluate(model, split, batch_size=7)
    expect = float(np.mean(np.argmax(table, axis=1) == split.labels))
    assert res.per_classifier == [expect] * 3 and res.ensemble == expect


def test_evaluate_single_sample_and_empty():
    model = tiny_model(0, classes=10)
    res = evaluate(model, Dataset(np.zeros((1, 2, 8, 8)), np.array([3]), 10))
    assert all(a in (0.0, 1.0) for a in res.per_classifier + [res.ensemble])
    with pytest.raises(ContractError):
        evaluate(model, Dataset(np.zeros((0, 2, 8, 8)), np.zeros(0, np.int64), 10))


# -- runs ------------------------------------------------------------------------


def test_train_run_smoke(tmp_path):
    report = train_run(smoke_config(tmp_path))
    rows = list(csv.reader(report.csv_path.open()))
    k1 = len(report.best_acc)
    assert rows[0] == metrics_header(k1)
    assert len(rows) - 1 == 2
    assert len(report.entries) == k1 + 1
    assert report.manifest_path.exists() and (report.run_dir / "final.ckpt").exists()
    for k in range(1, k1 + 1):
        assert (report.run_dir / f"best_c{k}.ckpt").exists()
    assert all(np.isfinite(v) for r in report.rows for v in r.values() if isinstance(v, float))
    assert all(f"{float(c):.6f}" == c for c in rows[1][1:])


def test_eval_every_leaves_blank_cells(tmp_path):
    report = train_run(smoke_config(tmp_path, epochs=3, eval_every=2))
    rows = list(csv.DictReader(report.csv_path.open()))
    assert [r["acc_c1"] == "" for r in rows] == [True, False, False]


def test_run_requires_seed(tmp_path):
    with pytest.raises(ConfigError):
        train_run(smoke_config(tmp_path, seed=None))


def test_run_reports_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError, match="file"):
        train_run(smoke_config(tmp_path, checkpoint_dir=str(blocker / "sub")))


def test_identical_config_identical_csv(tmp_path):
    a = train_run(smoke_config(tmp_path, "a"))
    b = train_run(smoke_config(tmp_path, "b"))
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert (a.run_dir / "final.ckpt").read_bytes() == (b.run_dir / "final.ckpt").read_bytes()
    c = train_run(smoke_config(tmp_path, "c", seed=4))
    assert c.csv_path.read_bytes() != a.csv_path.read_bytes()


def test_float32_run(tmp_path):
    report = train_run(smoke_config(tmp_path, precision="float32", epochs=1))
    ckpt = ck.load_checkpoint(report.run_dir / "final.ckpt")
    assert ckpt.tensors["model/param/" + next(iter(dict(restore_model(ckpt).named_parameters())))].dtype == np.float32
    assert ad.get_default_dtype() == np.float64


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_save_load_save_identical(tmp_path):
    report = train_run(smoke_config(tmp_path, epochs=1))
    path = report.run_dir / "final.ckpt"
    ckpt = ck.load_checkpoint(path)
    again = ck.save_checkpoint(ckpt, tmp_path / "again.ckpt")
    assert again.read_bytes() == path.read_bytes()
    assert ckpt.epoch == 1 and ckpt.rng_state["bit_generator"] == "PCG64"
    assert ckpt.section("opt/model") and ckpt.section("critic")


def test_checkpoint_restores_model_outputs(tmp_path):
    model = tiny_model(4)
    model.eval()
    ckpt = ck.Checkpoint(arch={}, tensors=ck.module_state(model, "model"))
    blank = tiny_model(8)
    ck.load_module_state(blank, ck.from_bytes(ck.to_bytes(ckpt)), "model")
    blank.eval()
    x = Tensor(batch()[0])
    with ad.no_grad():
        assert np.array_equal(model.forward_all(x).logits[-1].data, blank.forward_all(x).logits[-1].data)


def test_checkpoint_dtypes_round_trip():
    tensors = {
        "a": np.arange(6, dtype=np.float64).reshape(2, 3),
        "b": np.ones(3, np.float32),
        "c": np.array([-5, 7], np.int64),
        "d": np.array([1, 2, 255], np.uint8),
        "e": np.float64(3.5).reshape(()),
    }
    back = ck.from_bytes(ck.to_bytes(ck.Checkpoint(arch={"x": 1}, tensors=tensors, epoch=4)))
    assert back.arch == {"x": 1} and back.epoch == 4 and back.rng_state is None
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)


def test_checkpoint_layout_header():
    raw = ck.to_bytes(ck.Checkpoint(arch={}, tensors={}))
    assert raw[:4] == b"BDKD" and raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little") and raw[12:14] == b"{}"


def test_checkpoint_errors(tmp_path):
    raw = ck.to_bytes(ck.Checkpoint(arch={}, tensors={"w": np.ones(4)}))
    with pytest.raises(DataError, match="magic"):
        ck.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="truncated"):
        ck.from_bytes(raw[:-5])
    with pytest.raises(DataError, match="version"):
        ck.from_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(DataError, match="not found"):
        ck.load_checkpoint(tmp_path / "missing.ckpt")
    with pytest.raises(DataError, match="unsupported dtype"):
        ck.to_bytes(ck.Checkpoint(arch={}, tensors={"z": np.ones(2, np.complex128)}))


def test_load_module_state_checks(tmp_path):
    model = tiny_model(0)
    with pytest.raises(DataError, match="no record"):
        ck.load_module_state(model, ck.Checkpoint(arch={}), "model")
    state = ck.module_state(model, "model")
    key = next(iter(state))
    state[key] = np.zeros((1,))
    with pytest.raises(DataError, match="shape"):
        ck.load_module_state(model, ck.Checkpoint(arch={}, tensors=state), "model")


# -- teacher-student ---------------------------------------------------------------


def _common_columns(path, count):
    return [row[:count] for row in csv.reader(open(path))]


def test_distill_with_zero_lambdas_matches_plain_training(tmp_path):
    teacher = train_run(smoke_config(tmp_path, "teacher", seed=11, epochs=1))
    plain = train_run(smoke_config(tmp_path, "plain"))
    zero = LossWeights(lambda1=0.0, lambda2=0.0, lambda3=0.0)
    kd = train_teacher_student(teacher.run_dir / "final.ckpt", smoke_config(tmp_path, "kd", weights=zero))
    width = len(metrics_header(len(plain.best_acc)))
    assert _common_columns(plain.csv_path, width) == _common_columns(kd.csv_path, width)
    assert (plain.run_dir / "final.ckpt").read_bytes() == (kd.run_dir / "final.ckpt").read_bytes()
    header = next(csv.reader(kd.csv_path.open()))
    assert header == metrics_header(len(plain.best_acc), kd=True)


def test_distill_identical_teacher_zero_at_step_zero(tmp_path):
    cfg = smoke_config(tmp_path, "self")
    init = _Run(cfg).checkpoint(0)
    run = _Run(cfg, teacher=restore_model(init))
    run.model.eval()
    x, _ = run.batch(0, 0, np.arange(16))
    with ad.no_grad():
        kd = loss_kd_total(run.ctx.teacher.forward_all(Tensor(x)), run.model.forward_all(Tensor(x)), cfg.weights)
    assert float(kd.kl.data) == 0.0 and float(kd.l2.data) == 0.0


def test_distill_smoke_finite(tmp_path):
    teacher = train_run(smoke_config(tmp_path, "teacher", epochs=1))
    report = train_teacher_student(teacher.run_dir / "final.ckpt", smoke_config(tmp_path, "student", seed=5))
    for row in report.rows:
        for key in ("loss_kd_kl", "loss_kd_l2", "loss_kd_w", "loss_kd_d"):
            assert np.isfinite(row[key])


def test_distill_branch_mismatch(tmp_path):
    teacher = train_run(smoke_config(tmp_path, "teacher", epochs=1, branches=1))
    with pytest.raises(ConfigError, match="classifiers"):
        train_teacher_student(teacher.run_dir / "final.ckpt", smoke_config(tmp_path, "student", branches=2))
