"""The federated round loop.

``run_experiment`` wires everything together: build the dataset, hold
out a stratified test split, partition the training data across clients
by Dirichlet label skew, then for each round sample a client subset,
train locally, aggregate deltas, and step the server optimizer.

Clients are pure functions of (round-start state, shard, config, derived
seed), and every random stream is keyed by purpose tags, so a run is a
pure function of its config: rerunning, or distributing clients over a
thread pool, reproduces results bit for bit.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .client import ClientConfig, ClientShard, ClientUpdate, DivergenceError, local_train
from .data import (
    Dataset,
    dirichlet_partition,
    load_csv_dataset,
    gen_synthetic,
    split_train_test,
)
from .model import Batch, ModelSpec, evaluate, init_params
from .params import NonFiniteError, ParamVector
from .rng import seeded_rng, spawn_seed
from .server import ServerConfig, ServerState, aggregate, aggregate_control, server_step

# Purpose tags for seed derivation (dataset tags live in data.py).
TAG_INIT = 10
TAG_SAMPLING = 11
TAG_CLIENT = 12

#: Display names for every client/server optimizer combination.
ALGORITHM_NAMES: dict[tuple[str, str], str] = {
    ("sgd", "sgd"): "FedAvg",
    ("sgd", "adam"): "FedAdam",
    ("sgd", "adagrad"): "FedAdagrad",
    ("sgd", "yogi"): "FedYogi",
    ("prox", "sgd"): "FedProx",
    ("prox", "adam"): "ProxAdam",
    ("prox", "adagrad"): "ProxAdagrad",
    ("prox", "yogi"): "ProxYogi",
    ("scaf", "sgd"): "Scaffold",
    ("scaf", "adam"): "ScafAdam",
    ("scaf", "adagrad"): "ScafAdagrad",
    ("scaf", "yogi"): "ScafYogi",
    ("nova", "sgd"): "FedNova",
    ("nova", "adam"): "NovaAdam",
    ("nova", "adagrad"): "NovaAdagrad",
    ("nova", "yogi"): "NovaYogi",
}

METRICS_COLUMNS = (
    "round",
    "algorithm_name",
    "opt_c",
    "opt_s",
    "train_loss",
    "test_loss",
    "test_acc",
    "best_acc",
    "wall_ms",
    "status",
)


def algorithm_name(opt_c: str, opt_s: str) -> str:
    try:
        return ALGORITHM_NAMES[(opt_c, opt_s)]
    except KeyError:
        raise ValueError(f"no algorithm for opt_c={opt_c!r}, opt_s={opt_s!r}") from None


@dataclass(frozen=True)
class DataConfig:
    """Where the data comes from and how it is split/partitioned."""

    source: str = "synthetic"
    alpha: float = 0.1
    test_fraction: float = 0.2
    # synthetic source
    num_classes: int = 10
    dim: int = 20
    samples_per_class: int = 200
    spread: float = 2.0
    # csv source
    path: str | None = None
    label_col: int | str = -1
    has_header: bool = False

    def __post_init__(self) -> None:
        if self.source not in ("synthetic", "csv"):
            raise ValueError(f"data source must be 'synthetic' or 'csv', got {self.source!r}")
        if not (self.alpha > 0):
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.source == "synthetic":
            if self.num_classes < 2 or self.dim < 1 or self.samples_per_class < 1:
                raise ValueError("synthetic data needs num_classes >= 2, dim >= 1, samples_per_class >= 1")
            if not (self.spread > 0):
                raise ValueError(f"spread must be positive, got {self.spread}")
        else:
            if not self.path:
                raise ValueError("csv data source needs a path")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choice; input/output dims are taken from the data."""

    kind: str = "logistic"
    hidden_dim: int | None = None
    activation: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "mlp1"):
            raise ValueError(f"model kind must be 'logistic' or 'mlp1', got {self.kind!r}")
        if self.kind == "logistic" and (self.hidden_dim is not None or self.activation is not None):
            raise ValueError("logistic model takes no hidden_dim/activation")

    def resolve(self, ds: Dataset) -> ModelSpec:
        if self.kind == "logistic":
            return ModelSpec("logistic", ds.dim, ds.num_classes)
        return ModelSpec(
            "mlp1",
            ds.dim,
            ds.num_classes,
            hidden_dim=self.hidden_dim if self.hidden_dim is not None else 32,
            activation=self.activation if self.activation is not None else "relu",
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a single run depends on; two equal configs give equal runs."""

    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    num_clients: int = 100
    sample_ratio: float = 0.1
    rounds: int = 2000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not (0.0 < self.sample_ratio <= 1.0):
            raise ValueError(f"sample_ratio must be in (0, 1], got {self.sample_ratio}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    @property
    def opt_c(self) -> str:
        return self.client.opt_c

    @property
    def opt_s(self) -> str:
        return self.server.opt_s

    @property
    def algorithm(self) -> str:
        return algorithm_name(self.opt_c, self.opt_s)


@dataclass(frozen=True)
class RoundMetrics:
    """Per-round record; test metrics are None except at evaluation rounds."""

    round_idx: int
    selected: tuple[int, ...]
    train_loss: float | None
    test_loss: float | None
    test_acc: float | None
    best_acc: float | None
    wall_ms: float
    payload_bytes: int
    status: str = "ok"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    final_state: ServerState
    best_params: ParamVector
    best_acc: float
    status: str = "ok"
    error: str | None = None

    @property
    def algorithm(self) -> str:
        return self.config.algorithm

    @property
    def diverged(self) -> bool:
        return self.status != "ok"


def sample_clients(num_clients: int, sample_ratio: float, round_idx: int, seed: int) -> list[int]:
    """Uniform sample without replacement of max(1, floor(ratio * N)) ids, sorted."""
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if not (0.0 < sample_ratio <= 1.0):
        raise ValueError(f"sample_ratio must be in (0, 1], got {sample_ratio}")
    if round_idx < 0:
        raise ValueError(f"round_idx must be >= 0, got {round_idx}")
    count = max(1, math.floor(sample_ratio * num_clients))
    picked = seeded_rng(seed, round_idx).choice(num_clients, size=count, replace=False)
    return sorted(int(i) for i in picked)


def build_dataset(cfg: DataConfig, seed: int) -> Dataset:
    if cfg.source == "synthetic":
        return gen_synthetic(cfg.num_classes, cfg.dim, cfg.samples_per_class, cfg.spread, seed)
    return load_csv_dataset(cfg.path, cfg.label_col, cfg.has_header)


class FederatedRun:
    """Owns all mutable state of one experiment; advance it round by round."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1):
        if threads < 1:
            raise ValueError(f"threads must be >= 1, got {threads}")
        self.cfg = cfg
        self.threads = threads
        full = build_dataset(cfg.data, cfg.seed)
        train, test = split_train_test(full, cfg.data.test_fraction, cfg.seed)
        if cfg.num_clients > len(train):
            raise ValueError(
                f"num_clients={cfg.num_clients} exceeds the {len(train)} training samples"
            )
        self.spec = cfg.model.resolve(train)
        self.partition = dirichlet_partition(train, cfg.num_clients, cfg.data.alpha, cfg.seed)
        self.shards = [
            ClientShard(cid, train.features[idx], train.labels[idx])
            for cid, idx in enumerate(self.partition.assignment)
        ]
        self.test_batch = Batch(test.features, test.labels)
        w0 = init_params(self.spec, spawn_seed(cfg.seed, TAG_INIT))
        self.state = ServerState.initial(w0)
        self.initial_params = w0
        # Per-client control variates persist across rounds; clients that
        # have never been selected keep the zero vector.
        self.controls: dict[int, ParamVector] = {}
        if cfg.opt_c == "scaf":
            zero = ParamVector.zeros(len(w0))
            self.controls = {cid: zero for cid in range(cfg.num_clients)}
        self._sampling_seed = spawn_seed(cfg.seed, TAG_SAMPLING)
        self.metrics: list[RoundMetrics] = []
        self.best_acc = -math.inf
        self.best_params = w0
        self.last_delta: ParamVector | None = None
        self.last_updates: list[ClientUpdate] = []

    def _is_eval_round(self, round_idx: int) -> bool:
        return round_idx % self.cfg.eval_every == 0 or round_idx == self.cfg.rounds

    def _evaluate(self) -> tuple[float, float]:
        return evaluate(self.spec, self.state.w, self.test_batch)

    def _record_eval(self) -> tuple[float, float, float]:
        test_loss, test_acc = self._evaluate()
        if test_acc > self.best_acc:
            self.best_acc = test_acc
            self.best_params = self.state.w
        return test_loss, test_acc, self.best_acc

    def _payload_bytes(self, num_selected: int) -> int:
        vec = 8 * self.spec.param_count
        down = vec + (vec if self.cfg.opt_c == "scaf" else 0)
        up = vec + (vec if self.cfg.opt_c == "scaf" else 0)
        up += 16  # sample count + step count
        if self.cfg.opt_c == "nova":
            up += 8  # coefficient norm
        return num_selected * (down + up)

    def _train_one(self, round_idx: int, cid: int) -> tuple[ClientUpdate, ParamVector | None]:
        scaf = self.cfg.opt_c == "scaf"
        return local_train(
            self.spec,
            self.state.w,
            self.shards[cid],
            self.cfg.client,
            round_idx,
            spawn_seed(self.cfg.seed, TAG_CLIENT, round_idx, cid),
            global_c=self.state.c if scaf else None,
            local_c=self.controls[cid] if scaf else None,
        )

    def run_round(self, round_idx: int) -> RoundMetrics:
        """Advance one round; raises DivergenceError if any client blows up."""
        t0 = time.perf_counter()
        cfg = self.cfg
        ids = sample_clients(cfg.num_clients, cfg.sample_ratio, round_idx, self._sampling_seed)
        if self.threads > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(lambda cid: self._train_one(round_idx, cid), ids))
        else:
            results = [self._train_one(round_idx, cid) for cid in ids]
        updates = [upd for upd, _ in results]

        try:
            mode = "nova" if cfg.opt_c == "nova" else "weighted_avg"
            delta = aggregate(updates, mode)
            if cfg.opt_c == "scaf":
                control_delta = aggregate_control(updates)
                new_c = ParamVector(self.state.c.values + control_delta.values)
                self.state = replace(self.state, c=new_c)
                for upd, new_local in results:
                    self.controls[upd.client_id] = new_local
            self.state = server_step(self.state, delta, cfg.server)
        except NonFiniteError as exc:
            raise DivergenceError(round_idx, None, None, str(exc)) from exc
        self.last_delta = delta
        self.last_updates = updates

        train_loss = float(np.mean([u.train_loss for u in updates]))
        test_loss = test_acc = best = None
        if self._is_eval_round(round_idx):
            test_loss, test_acc, best = self._record_eval()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rm = RoundMetrics(
            round_idx=round_idx,
            selected=tuple(ids),
            train_loss=train_loss,
            test_loss=test_loss,
            test_acc=test_acc,
            best_acc=best,
            wall_ms=wall_ms,
            payload_bytes=self._payload_bytes(len(ids)),
            status="ok",
        )
        self.metrics.append(rm)
        return rm

    def run(
        self,
        out_dir: str | Path | None = None,
        on_round: Callable[["FederatedRun", RoundMetrics], None] | None = None,
        include_timing: bool = True,
    ) -> ExperimentResult:
        """Run all rounds; on divergence, stop and flush what exists."""
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

        # The initial model seeds best-accuracy tracking but contributes no
        # metrics row: the series covers training rounds 1..T only.
        if self.best_acc == -math.inf:
            self._record_eval()

        status, error = "ok", None
        for round_idx in range(1, self.cfg.rounds + 1):
            try:
                rm = self.run_round(round_idx)
            except DivergenceError as exc:
                self.metrics.append(
                    RoundMetrics(
                        round_idx=exc.round_idx,
                        selected=(),
                        train_loss=None,
                        test_loss=None,
                        test_acc=None,
                        best_acc=None,
                        wall_ms=0.0,
                        payload_bytes=0,
                        status="diverged",
                    )
                )
                status, error = "diverged", str(exc)
                break
            if on_round is not None:
                on_round(self, rm)
            if out is not None and self._is_eval_round(round_idx):
                self._flush(out, include_timing)

        result = ExperimentResult(
            config=self.cfg,
            metrics=self.metrics,
            final_state=self.state,
            best_params=self.best_params,
            best_acc=self.best_acc,
            status=status,
            error=error,
        )
        if out is not None:
            self._flush(out, include_timing)
            save_params(out / "model_final.bin", self.state.w, self.spec)
            save_params(out / "model_best.bin", self.best_params, self.spec)
        return result

    def _flush(self, out: Path, include_timing: bool) -> None:
        write_metrics_csv(
            out / "metrics.csv",
            self.metrics,
            self.cfg.opt_c,
            self.cfg.opt_s,
            include_timing=include_timing,
        )


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    threads: int = 1,
    on_round: Callable[[FederatedRun, RoundMetrics], None] | None = None,
    include_timing: bool = True,
) -> ExperimentResult:
    """Build a run from the config and execute it end to end."""
    return FederatedRun(cfg, threads=threads).run(
        out_dir=out_dir, on_round=on_round, include_timing=include_timing
    )


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(
    path: str | Path,
    metrics: list[RoundMetrics],
    opt_c: str,
    opt_s: str,
    include_timing: bool = True,
) -> None:
    """One row per checkpoint (plus any divergence sentinel row).

    Rounds without an evaluation are tracked in memory but not written.
    With include_timing=False the wall_ms cell is left blank so outputs
    of identical runs compare byte-for-byte.
    """
    name = algorithm_name(opt_c, opt_s)
    rows = [rm for rm in metrics if rm.test_acc is not None or rm.status != "ok"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for rm in rows:
            writer.writerow(
                [
                    rm.round_idx,
                    name,
                    opt_c,
                    opt_s,
                    _fmt(rm.train_loss),
                    _fmt(rm.test_loss),
                    _fmt(rm.test_acc),
                    _fmt(rm.best_acc),
                    _fmt(rm.wall_ms) if include_timing else "",
                    rm.status,
                ]
            )


def save_params(path: str | Path, params: ParamVector, spec: ModelSpec | None = None) -> None:
    """Binary vector dump: u64-LE length header then float64-LE values.

    A human-readable sidecar (<path>.meta.txt) records the architecture
    and layout so the blob can be interpreted without the config.
    """
    path = Path(path)
    arr = params.values
    with open(path, "wb") as fh:
        fh.write(np.array([arr.shape[0]], dtype="<u8").tobytes())
        fh.write(arr.astype("<f8").tobytes())
    if spec is not None:
        lines = [
            f"kind: {spec.kind}",
            f"input_dim: {spec.input_dim}",
            f"num_classes: {spec.num_classes}",
        ]
        if spec.kind == "mlp1":
            lines.append(f"hidden_dim: {spec.hidden_dim}")
            lines.append(f"activation: {spec.activation}")
        lines.append(f"param_count: {spec.param_count}")
        lines.append(
            "layout: per layer, weights row-major (fan_in x fan_out) then biases; "
            "values are float64 little-endian after a u64 little-endian count"
        )
        Path(str(path) + ".meta.txt").write_text("\n".join(lines) + "\n")


def load_params(path: str | Path) -> ParamVector:
    """Read back a vector written by save_params (exact bytes round-trip)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated header")
    count = int(np.frombuffer(raw[:8], dtype="<u8")[0])
    expected = 8 + 8 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} values, got {len(raw)}")
    return ParamVector(np.frombuffer(raw[8:], dtype="<f8"))
