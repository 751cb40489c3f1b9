"""Built-in self checks for the ``check`` CLI verb.

Each check exercises one load-bearing piece of numerics against an
independent oracle (finite differences, closed forms, hand-computed
values, exact-equivalence arguments) so a user can validate an install
in seconds without the full test suite.
"""
from __future__ import annotations

import numpy as np

from .client import ClientConfig, ClientShard, ClientUpdate, accum_coeff_norm, local_train
from .data import dirichlet_partition, gen_synthetic
from .model import Batch, ModelSpec, finite_diff_grad, init_params, loss_and_grad
from .orchestrator import DataConfig, ExperimentConfig, run_experiment
from .params import ParamVector
from .server import ServerConfig, ServerState, aggregate, server_step


class CheckFailure(AssertionError):
    pass


def _require(cond: bool, detail: str) -> None:
    if not cond:
        raise CheckFailure(detail)


def _random_batch(spec: ModelSpec, seed: int, n: int = 16) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(n, spec.input_dim)),
        rng.integers(0, spec.num_classes, size=n),
    )


def check_gradients() -> str:
    """Analytic gradients match central finite differences."""
    worst = 0.0
    for spec in (
        ModelSpec("logistic", 5, 3),
        ModelSpec("mlp1", 4, 3, hidden_dim=6, activation="tanh"),
    ):
        params = init_params(spec, 7)
        batch = _random_batch(spec, 11)
        _, grad = loss_and_grad(spec, params, batch)
        fd = finite_diff_grad(spec, params, batch)
        scale = np.maximum(np.abs(fd.values), 1e-8)
        worst = max(worst, float(np.max(np.abs(grad.values - fd.values) / scale)))
    _require(worst < 1e-5, f"gradient mismatch {worst:.2e}")
    return f"worst relative error {worst:.2e}"


def check_coeff_norm() -> str:
    """Momentum coefficient norm closed form equals explicit unrolling."""
    for rho in (0.0, 0.5, 0.9):
        for tau in range(1, 11):
            u = total = 0.0
            for _ in range(tau):
                u = rho * u + 1.0
                total += u
            got = accum_coeff_norm(rho, tau)
            _require(abs(got - total) <= 1e-12 * max(1.0, total), f"rho={rho}, tau={tau}: {got} vs {total}")
    return "closed form matches unrolling for rho in {0, 0.5, 0.9}, tau 1..10"


def check_adaptive_first_step() -> str:
    """First adaptive server step from zero state matches hand algebra."""
    w = ParamVector.zeros(3)
    delta = ParamVector(np.full(3, 0.1))
    state = ServerState.initial(w)
    m = 0.1 * 0.1
    expected = {
        "adagrad": 0.005 * m / (np.sqrt(0.1 * 0.1) + 1e-8),
        "adam": 0.005 * m / (np.sqrt(0.01 * 0.1 * 0.1) + 1e-8),
        "yogi": 0.005 * m / (np.sqrt(0.01 * 0.1 * 0.1) + 1e-8),
    }
    for opt_s, want in expected.items():
        new = server_step(state, delta, ServerConfig(opt_s=opt_s))
        got = new.w.values[0]
        _require(abs(got - want) <= 1e-12, f"{opt_s}: step {got!r} != {want!r}")
    return "adam/adagrad/yogi one-step updates match hand values"


def check_aggregation() -> str:
    """Weighted averaging and step-normalized averaging agree on oracles."""
    def upd(cid, vec, n, norm=None):
        return ClientUpdate(cid, ParamVector(vec), n, 1, 0.0, coeff_norm=norm)

    got = aggregate([upd(0, [4.0], 1), upd(1, [0.0], 1), upd(2, [2.0], 2)], "weighted_avg")
    _require(abs(got.values[0] - 2.0) <= 1e-15, f"weighted_avg gave {got.values[0]!r}")
    uniform = [upd(i, [3.0, -1.0], 5, norm=4.25) for i in range(4)]
    nova = aggregate(uniform, "nova")
    avg = aggregate(uniform, "weighted_avg")
    _require(
        float(np.max(np.abs(nova.values - avg.values))) <= 1e-12,
        "normalized aggregation must equal plain averaging when clients are homogeneous",
    )
    return "hand-weighted example and homogeneous-normalization identity hold"


def check_prox_zero_is_plain() -> str:
    """prox with mu=0 reproduces the plain client bit for bit."""
    spec = ModelSpec("logistic", 4, 3)
    shard = ClientShard(0, *_shard_arrays(spec, seed=3, n=12))
    w = init_params(spec, 1)
    base = dict(local_epochs=2, batch_size=5, lr=0.05, momentum=0.9, weight_decay=1e-4)
    upd_sgd, _ = local_train(spec, w, shard, ClientConfig(opt_c="sgd", **base), 1, 99)
    upd_prox, _ = local_train(
        spec, w, shard, ClientConfig(opt_c="prox", prox_mu=0.0, **base), 1, 99
    )
    _require(upd_sgd.delta.same_bits(upd_prox.delta), "deltas differ")
    return "identical deltas, bit for bit"


def check_determinism() -> str:
    """Re-running a small experiment reproduces final params exactly."""
    cfg = _tiny_config()
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    _require(a.final_state.w.same_bits(b.final_state.w), "reruns disagree")
    c = run_experiment(cfg, threads=4)
    _require(a.final_state.w.same_bits(c.final_state.w), "thread count changed results")
    return "rerun and 4-thread run are byte-identical"


def check_partition() -> str:
    """Dirichlet partition is a disjoint cover with no empty client."""
    ds = gen_synthetic(num_classes=4, dim=3, samples_per_class=30, spread=1.0, seed=5)
    part = dirichlet_partition(ds, num_clients=8, alpha=0.1, seed=5)
    merged = np.sort(np.concatenate(part.assignment))
    _require(np.array_equal(merged, np.arange(len(ds))), "not a disjoint cover")
    _require(int(part.counts.min()) >= 1, "an empty client survived repair")
    _require(abs(float(part.ratios.sum()) - 1.0) <= 1e-12, "ratios do not sum to 1")
    return "disjoint cover, all clients non-empty, ratios sum to 1"


def _shard_arrays(spec: ModelSpec, seed: int, n: int):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(n, spec.input_dim)),
        rng.integers(0, spec.num_classes, size=n).astype(np.int64),
    )


def _tiny_config() -> ExperimentConfig:
    return ExperimentConfig(
        client=ClientConfig(opt_c="scaf", batch_size=8),
        server=ServerConfig(opt_s="yogi"),
        data=DataConfig(num_classes=3, dim=4, samples_per_class=30, spread=1.0),
        num_clients=6,
        sample_ratio=0.5,
        rounds=3,
        eval_every=1,
        seed=2,
    )


CHECKS = (
    ("gradients", check_gradients),
    ("coeff-norm", check_coeff_norm),
    ("adaptive-first-step", check_adaptive_first_step),
    ("aggregation", check_aggregation),
    ("prox-zero", check_prox_zero_is_plain),
    ("determinism", check_determinism),
    ("partition", check_partition),
)


def run_checks(verbose: bool = True) -> bool:
    """Run every check; print one line each; True when all pass."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            detail = fn()
            if verbose:
                print(f"ok   {name}: {detail}")
        except CheckFailure as exc:
            all_ok = False
            print(f"FAIL {name}: {exc}")
    return all_ok
