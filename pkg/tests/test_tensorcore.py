from __future__ import annotations

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from sidflow.errors import ConfigError, NumericError, UsageError
from sidflow.tensorcore import autodiff as ad
from sidflow.tensorcore.autodiff import Tensor
from sidflow.tensorcore.checkpoint import config_hash, load_checkpoint, save_checkpoint
from sidflow.tensorcore.gradcheck import gradient_check, rel_err
from sidflow.tensorcore.nets import (ArchSpec, NetParams, apply, init_params, net_forward,
                                     zero_params)
from sidflow.tensorcore.optim import AdamState, adam_step

GOLDEN = Path(__file__).parent / "golden" / "net_forward_seed42.npy"
GOLDEN_ARCH = ArchSpec(dim=3, width=16, depth=3, window=1, n_pos=2, n_attn=1)


def _golden_inputs():
    rng = np.random.default_rng(42)
    x = rng.normal(size=(2, 5, 3))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    return x * mask[..., None], mask


def _golden_output():
    x, mask = _golden_inputs()
    return net_forward(init_params(GOLDEN_ARCH, 42), x, 0.5, mask=mask)


# -- autodiff ------------------------------------------------------------------
def test_sum_of_parameters_has_unit_gradient():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    (g,) = ad.grad(p.sum(), [p])
    assert np.array_equal(g, np.ones((2, 3)))


def test_stop_gradient_gives_bitwise_zero():
    w = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    u = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    x = w * 3.0
    loss = (ad.stop_gradient(x) * u).sum() + (u * u).sum()
    gw, gu = ad.grad(loss, [w, u])
    assert np.array_equal(gw, np.zeros(2))
    assert not np.any(np.signbit(gw))
    assert np.allclose(gu, x.data + 2 * u.data)


def test_stopped_flag_set():
    assert ad.stop_gradient(Tensor(np.ones(2), requires_grad=True)).stopped


def test_gradient_for_unrecorded_tensor_is_usage_error():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3))
    with pytest.raises(UsageError):
        ad.grad((a * b).sum(), [b])


def test_nonscalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        ad.grad(a * 2.0, [a])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        b = a * 2.0
    assert not b.requires_grad


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "sigmoid", "silu", "sin", "cos",
                                "tabs", "softmax", "logsumexp"])
def test_elementwise_ops_match_finite_differences(op, rng):
    x0 = rng.uniform(0.2, 1.5, size=(3, 4))
    w = rng.normal(size=(3, 4)) if op != "logsumexp" else rng.normal(size=3)
    fn = getattr(ad, op)

    def f(x):
        return (fn(x) * w).sum()

    xt = Tensor(x0, requires_grad=True)
    (g,) = ad.grad(f(xt), [xt])
    h = 1e-6
    num = np.zeros_like(x0)
    with ad.no_grad():
        for idx in np.ndindex(x0.shape):
            xp, xm = x0.copy(), x0.copy()
            xp[idx] += h
            xm[idx] -= h
            num[idx] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2 * h)
    assert np.max(np.abs(g - num)) < 1e-7


def test_structural_ops_gradients(rng):
    a0 = rng.normal(size=(2, 4, 3))
    b0 = rng.normal(size=(3, 5))
    a = Tensor(a0, requires_grad=True)
    b = Tensor(b0, requires_grad=True)
    y = ad.concat([a @ b, ad.shift(a, 1, axis=1) @ b], axis=-1)
    y = ad.swapaxes(y) * 0.5 + ad.reshape(a, (2, 12)).mean() / ad.power(Tensor(2.0), 2)
    loss = (y * y).sum() + ad.getitem(a, (0, 1)).sum()
    ga, gb = ad.grad(loss, [a, b])

    def f(av, bv):
        with ad.no_grad():
            A, B = Tensor(av), Tensor(bv)
            yy = ad.concat([A @ B, ad.shift(A, 1, axis=1) @ B], axis=-1)
            yy = ad.swapaxes(yy) * 0.5 + ad.reshape(A, (2, 12)).mean() / 4.0
            return ((yy * yy).sum() + ad.getitem(A, (0, 1)).sum()).item()

    h = 1e-6
    for arr, g, which in ((a0, ga, 0), (b0, gb, 1)):
        for idx in list(np.ndindex(arr.shape))[::3]:
            p, m = arr.copy(), arr.copy()
            p[idx] += h
            m[idx] -= h
            args_p = (p, b0) if which == 0 else (a0, p)
            args_m = (m, b0) if which == 0 else (a0, m)
            num = (f(*args_p) - f(*args_m)) / (2 * h)
            assert rel_err(g[idx], num) < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises():
    a = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(NumericError):
        ad.grad(ad.log(a).sum(), [a])


# -- networks --------------------------------------------------------------------
def test_zero_weight_net_outputs_zero(rng):
    arch = ArchSpec(dim=2, width=8, depth=2)
    out = net_forward(zero_params(arch), rng.normal(size=(4, 3, 2)), 0.3)
    assert np.array_equal(out, np.zeros((4, 3, 2)))


@pytest.mark.parametrize("arch", [ArchSpec(dim=2, width=8, depth=2),
                                  ArchSpec(dim=3, width=8, depth=3, window=2, n_pos=2, n_attn=2)])
def test_masked_rows_are_exactly_zero(arch, rng):
    x = rng.normal(size=(2, 6, arch.dim))
    mask = np.ones((2, 6), dtype=bool)
    mask[0, 4:] = False
    x *= mask[..., None]
    out = net_forward(init_params(arch, 3), x, np.array([0.2, 0.7]), mask=mask)
    assert np.all(out[0, 4:] == 0.0)
    assert np.isfinite(out).all()


def test_padding_does_not_change_valid_outputs(rng):
    arch = ArchSpec(dim=3, width=8, depth=3, window=2, n_pos=2, n_attn=2)
    p = init_params(arch, 5)
    x = rng.normal(size=(1, 5, 3))
    base = net_forward(p, x, 0.4)
    xp = np.concatenate([x, np.zeros((1, 4, 3))], axis=1)
    mask = np.zeros((1, 9), dtype=bool)
    mask[0, :5] = True
    padded = net_forward(p, xp, 0.4, mask=mask)
    assert np.max(np.abs(padded[:, :5] - base)) < 1e-12


def test_forward_golden_replay():
    out = _golden_output()
    assert np.array_equal(out, _golden_output())
    if not GOLDEN.exists():
        GOLDEN.parent.mkdir(parents=True, exist_ok=True)
        np.save(GOLDEN, out)
    assert np.array_equal(out, np.load(GOLDEN))


def test_forward_replay_in_fresh_process():
    code = ("import numpy as np, sys; sys.path.insert(0, %r); import test_tensorcore as t; "
            "sys.stdout.write(t._golden_output().tobytes().hex())") % str(Path(__file__).parent)
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert bytes.fromhex(res.stdout) == _golden_output().tobytes()


def test_shape_mismatch_is_config_error(rng):
    with pytest.raises(ConfigError):
        net_forward(init_params(ArchSpec(dim=2, width=4, depth=1), 0), rng.normal(size=(2, 3, 3)),
                    0.5)


def test_nonfinite_input_is_numeric_error():
    x = np.full((1, 2, 2), np.nan)
    with pytest.raises(NumericError):
        net_forward(init_params(ArchSpec(dim=2, width=4, depth=1), 0), x, 0.5)


def test_label_out_of_range():
    arch = ArchSpec(dim=2, width=4, depth=1, num_labels=3, label_dim=2)
    with pytest.raises(ValueError):
        net_forward(init_params(arch, 0), np.zeros((1, 1, 2)), 0.5, label=np.array([3]))


def test_label_changes_output(rng):
    arch = ArchSpec(dim=2, width=8, depth=2, num_labels=3, label_dim=4)
    p = init_params(arch, 0)
    x = rng.normal(size=(1, 1, 2))
    assert not np.allclose(net_forward(p, x, 0.5, label=np.array([0])),
                           net_forward(p, x, 0.5, label=np.array([1])))


def test_invalid_arch_rejected():
    with pytest.raises(ConfigError):
        ArchSpec(num_labels=2, label_dim=0)
    with pytest.raises(ConfigError):
        ArchSpec(depth=1, n_attn=2)


# -- Adam ------------------------------------------------------------------------
def _scalar_params(v=0.0):
    return NetParams(ArchSpec(dim=1, width=1, depth=0), {"p": np.array([v])})


def test_adam_first_step_hand_value():
    state = AdamState(lr=0.1, beta1=0.0, beta2=0.999, eps_stab=1e-8)
    state, p = adam_step(state, _scalar_params(), {"p": np.array([1.0])})
    assert state.step_count == 1
    assert abs(p.arrays["p"][0] - (-0.1 / (1 + 1e-8))) < 1e-15


def test_adam_constant_gradient_equal_steps():
    state = AdamState(lr=0.1, beta1=0.9)
    p0 = _scalar_params()
    state, p1 = adam_step(state, p0, {"p": np.array([1.0])})
    state, p2 = adam_step(state, p1, {"p": np.array([1.0])})
    d1 = p1.arrays["p"][0] - p0.arrays["p"][0]
    d2 = p2.arrays["p"][0] - p1.arrays["p"][0]
    assert abs(d1 - d2) < 1e-12


def test_adam_zero_gradient_leaves_params():
    state = AdamState(lr=0.1)
    p0 = _scalar_params(2.5)
    state, p1 = adam_step(state, p0, {"p": np.array([0.0])})
    assert p1.arrays["p"][0] == 2.5 and state.step_count == 1


def test_adam_nonfinite_gradient_aborts():
    state = AdamState(lr=0.1)
    with pytest.raises(NumericError, match="p"):
        adam_step(state, _scalar_params(), {"p": np.array([np.inf])})
    assert state.step_count == 0


@pytest.mark.parametrize("kw", [{"lr": 0.0}, {"lr": 1e-3, "beta1": 1.0}, {"lr": 1e-3, "beta2": -0.1}])
def test_adam_state_validation(kw):
    with pytest.raises(ConfigError):
        AdamState(**kw)


def test_training_is_bitwise_deterministic(rng):
    arch = ArchSpec(dim=2, width=8, depth=2)
    x = rng.normal(size=(4, 1, 2))
    target = rng.normal(size=(4, 1, 2))

    def train():
        p = init_params(arch, 7)
        st = AdamState(lr=1e-2)
        for _ in range(5):
            tens = p.tensors(requires_grad=True)
            out = apply(arch, tens, Tensor(x), np.full(4, 0.5), np.ones((4, 1), dtype=bool))
            loss = ((out - target) ** 2).sum()
            grads = ad.grad(loss, [tens[k] for k in p.trainable])
            st, p = adam_step(st, p, dict(zip(p.trainable, grads)))
        return p.digest()

    assert train() == train()


# -- gradient checks -----------------------------------------------------------------
def test_gradcheck_linear_net():
    rep = gradient_check(ArchSpec(dim=2, width=1, depth=0, n_freq=0), tolerance=1e-8)
    assert rep.passed, rep.line()


def test_gradcheck_default_point_net():
    rep = gradient_check(ArchSpec(dim=2, width=16, depth=3), max_coords=40)
    assert rep.passed, rep.line()


def test_gradcheck_detects_wrong_gradient():
    rep = gradient_check(ArchSpec(dim=2, width=4, depth=1), perturb=1e-3, max_coords=10)
    assert not rep.passed


def test_gradcheck_is_deterministic():
    arch = ArchSpec(dim=2, width=4, depth=2)
    assert gradient_check(arch, max_coords=5) == gradient_check(arch, max_coords=5)


# -- checkpoints ---------------------------------------------------------------------
def test_checkpoint_roundtrip(tmp_path):
    p = init_params(ArchSpec(dim=3, width=8, depth=2, window=1), 1)
    path = save_checkpoint(tmp_path / "a.ckpt", {"phi": p}, seed=3, step=10, config={"a": 1},
                           extra_arrays={"m": np.arange(3.0)}, extra={"note": "x"})
    nets, header, extra = load_checkpoint(path)
    assert nets["phi"].digest() == p.digest()
    assert nets["phi"].arch == p.arch
    assert header["seed"] == 3 and header["step"] == 10 and header["extra"] == {"note": "x"}
    assert np.array_equal(extra["m"], np.arange(3.0))
    raw = path.read_bytes()
    assert raw.startswith(b"SIDFLOW-CKPT 1\n")
    assert raw.endswith(np.arange(3.0).astype("<f8").tobytes())


def test_checkpoint_hash_verified(tmp_path):
    p = init_params(ArchSpec(dim=2, width=4, depth=1), 1)
    path = save_checkpoint(tmp_path / "a.ckpt", {"phi": p}, seed=0, step=0, config={"a": 1})
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected_hash=config_hash({"a": 2}))
    lines = path.read_bytes().split(b"\n", 2)
    lines[1] = lines[1].replace(b'"a": 1', b'"a": 2')
    (tmp_path / "b.ckpt").write_bytes(b"\n".join(lines))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "b.ckpt")


def test_checkpoint_truncated(tmp_path):
    p = init_params(ArchSpec(dim=2, width=4, depth=1), 1)
    path = save_checkpoint(tmp_path / "a.ckpt", {"phi": p}, seed=0, step=0, config={})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 1.5})
