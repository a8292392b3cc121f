"""The four collaborative training engines: fl, sl, sflv1, sflv2
(plus a centralized baseline), run as deterministic round state
machines over transport channels.

Determinism contract: with a fixed seed and config, every engine
produces identical results run to run. All weighted aggregations reduce
in ascending client-id order regardless of message arrival order;
client batch plans derive from seed^client^round; the sflv2 server-side
processing order comes from a seeded permutation per step. Client
sessions run concurrently in fl/sflv1/sflv2 and strictly sequentially
in sl (relay order: ascending id).
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Shard, pad_images, partition_uniform
from .errors import EmptyUpdateSet, ShapeMismatch, Timeout, ZeroMean
from .models import ArchitectureSpec, assemble_full, split_at
from .nn import (
    GradientSet,
    LayerSpec,
    ParameterSet,
    add_scaled,
    layer_forward,
    sgd_update,
    softmax_cross_entropy,
    stack_backward,
    stack_forward,
)
from .privacy import (
    DpConfig,
    clip_gradient,
    client_noise_rng,
    noisy_average,
    per_example_gradients,
    randomize_smashed,
)
from . import wire
from .transport import Fabric, TraceLog, TrafficCounter, build_fabric

ALGOS = ("central", "fl", "sl", "sflv1", "sflv2")


@dataclass
class TrainConfig:
    learning_rate: float
    local_epochs: int = 1
    batch_size: int = 64
    global_epochs: int = 1
    participation: float = 1.0  # all clients train every round
    seed: int = 0
    init_scheme: str = "xavier"
    dp: DpConfig | None = None
    compute_delay_s: float = 0.0
    eval_batch_size: int = 512

    def __post_init__(self):
        if self.participation != 1.0:
            raise ValueError("only full participation (C == 1.0) is supported")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


@dataclass
class SmashedBatch:
    client_id: int
    round: int
    batch_index: int
    activations: np.ndarray
    labels: np.ndarray

    @property
    def sample_count(self) -> int:
        return int(self.activations.shape[0])


@dataclass
class SmashedGradient:
    client_id: int
    round: int
    batch_index: int
    grad: np.ndarray


@dataclass
class ClientUpdateMsg:
    client_id: int
    round: int
    params: ParameterSet
    sample_count: int


@dataclass
class RoundRecord:
    round: int
    train_accs: list[float]
    test_accs: list[float]
    mean_train_acc: float
    mean_test_acc: float
    cv_train: float
    cv_test: float
    wall_time: float
    start_hashes: list[str] = field(default_factory=list)


@dataclass
class RunResult:
    algo: str
    final_params: ParameterSet
    final_client: ParameterSet | None
    final_server: ParameterSet | None
    rounds: list[RoundRecord]
    counter: TrafficCounter
    trace: TraceLog | None
    server_updates_per_round: list[int]
    shard_sizes: list[int]


# ---------------------------------------------------------------------------
# small pure helpers


def fedavg_aggregate(updates: list[ClientUpdateMsg]) -> ParameterSet:
    """W_{t+1} = sum_k (n_k / n) W_k, reduced in ascending client-id order."""
    if not updates:
        raise EmptyUpdateSet("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    names = ordered[0].params.names()
    for upd in ordered[1:]:
        if upd.params.names() != names:
            raise ShapeMismatch("client updates are not aligned")
        for (_, a), (_, b) in zip(ordered[0].params.entries, upd.params.entries):
            if a.shape != b.shape:
                raise ShapeMismatch(f"update shapes differ: {a.shape} vs {b.shape}")
    total = sum(u.sample_count for u in ordered)
    if total <= 0:
        raise EmptyUpdateSet("total sample count is zero")
    acc = ParameterSet([(n, np.zeros_like(v)) for n, v in ordered[0].params.entries])
    for upd in ordered:
        acc = add_scaled(acc, upd.params, upd.sample_count / total)
    acc.version = ordered[0].round + 1
    return acc


def weighted_average_params(parts: list[tuple[float, ParameterSet]]) -> ParameterSet:
    acc = ParameterSet([(n, np.zeros_like(v)) for n, v in parts[0][1].entries])
    for weight, params in parts:
        acc = add_scaled(acc, params, weight)
    return acc


def coefficient_of_variation(values: list[float]) -> float:
    """Population standard deviation over the mean."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if mean <= 0:
        raise ZeroMean(f"mean {mean} is not positive")
    return float(arr.std() / mean)


def evaluate(
    parts: list[tuple[list[LayerSpec], ParameterSet]],
    features: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 512,
) -> float:
    """Fraction of argmax-correct predictions, forwarding part by part."""
    if features.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, features.shape[0], batch_size):
        h = features[start : start + batch_size]
        for layers, params in parts:
            for layer in layers:
                h = layer_forward(layer, h, params)
        correct += int((h.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return correct / features.shape[0]


def batch_plan(
    indices: np.ndarray, batch_size: int, seed: int, client_id: int, rnd: int, epochs: int
) -> list[list[np.ndarray]]:
    """Deterministic per-epoch shuffles from seed^client^round, chunked."""
    rng = np.random.Generator(np.random.PCG64(seed ^ client_id ^ rnd))
    plan = []
    for _ in range(epochs):
        order = indices[rng.permutation(len(indices))]
        plan.append([order[i : i + batch_size] for i in range(0, len(order), batch_size)])
    return plan


def steps_in_plan(n: int, batch_size: int, epochs: int) -> int:
    return epochs * ((n + batch_size - 1) // batch_size)


def params_hash(params: ParameterSet) -> str:
    digest = hashlib.sha256()
    for name, value in params.entries:
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(value).tobytes())
    return digest.hexdigest()


def _params_to_records(params: ParameterSet) -> list[tuple[str, np.ndarray]]:
    return list(params.entries) + [("_v", np.asarray([float(params.version)]))]


def _records_to_params(msg: wire.WireMessage) -> ParameterSet:
    entries = [(n, v) for n, v in msg.records if not n.startswith("_")]
    version = int(msg.get("_v").reshape(-1)[0])
    return ParameterSet(entries, version)


def _full_net_step(
    layers: list[LayerSpec], params: ParameterSet, x: np.ndarray, y: np.ndarray, lr: float
) -> ParameterSet:
    logits, caches = stack_forward(layers, params, x)
    _, dlogits = softmax_cross_entropy(logits, y)
    _, grads = stack_backward(layers, params, caches, dlogits, need_input_grad=False)
    return sgd_update(params, grads, lr)


def _server_step(
    layers: list[LayerSpec], params: ParameterSet, acts: np.ndarray, labels: np.ndarray
) -> tuple[np.ndarray, GradientSet]:
    logits, caches = stack_forward(layers, params, acts)
    _, dlogits = softmax_cross_entropy(logits, labels)
    return stack_backward(layers, params, caches, dlogits)


# ---------------------------------------------------------------------------
# main server (sl / sflv1 / sflv2 data plane)


class MainServer:
    """Holds the server-side portion and serves per-client channels.

    Modes: "per_batch" updates the shared parameters after every
    forward-backward pass (sl); "copies" trains one parameter copy per
    client against the round-start state and folds the copies into the
    shared parameters at round end (sflv1); "stepwise" batches arrivals
    per step and processes them in a seeded random client order,
    updating the shared parameters after every pass (sflv2).
    """

    def __init__(self, layers, params: ParameterSet, lr: float, mode: str, seed: int = 0):
        self.layers = list(layers)
        self.params = params
        self.lr = lr
        self.mode = mode
        self.seed = seed
        self._lock = threading.Lock()
        self._copies: dict[int, ParameterSet] = {}
        self._weights: dict[int, float] = {}
        self._update_counts: dict[int, int] = {}
        self._threads: list[threading.Thread] = []
        self._errors: list[BaseException] = []
        # stepwise state
        self._pending: dict[tuple[int, int], tuple[wire.WireMessage, object]] = {}
        self._step_of: dict[int, int] = {}
        self._cond = threading.Condition()
        self._round_steps: dict[int, int] = {}

    def begin_round(
        self, rnd: int, weights: dict[int, float] | None = None, steps: dict[int, int] | None = None
    ) -> None:
        with self._lock:
            self._update_counts.setdefault(rnd, 0)
            if self.mode == "copies":
                self._copies = {}
                self._weights = dict(weights or {})
        if self.mode == "stepwise":
            with self._cond:
                self._pending.clear()
                self._step_of = {k: 0 for k in (steps or {})}
                self._round_steps = dict(steps or {})

    def serve(self, channels: dict[int, object]) -> None:
        for k in sorted(channels):
            thread = threading.Thread(
                target=self._worker, args=(k, channels[k]), name=f"main-server-{k}", daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _worker(self, client_id: int, channel) -> None:
        try:
            while True:
                try:
                    msg = channel.recv(timeout=None)
                except Exception:
                    return  # channel closed: run is over
                if msg.msg_type == wire.MSG_CONTROL:
                    return
                if self.mode == "per_batch":
                    self._handle_per_batch(msg, channel)
                elif self.mode == "copies":
                    self._handle_copies(client_id, msg, channel)
                else:
                    self._enqueue_stepwise(client_id, msg, channel)
        except BaseException as exc:  # surfaced by the orchestrator
            self._errors.append(exc)
            with self._cond:
                self._cond.notify_all()

    def _reply(self, channel, msg: wire.WireMessage, grad: np.ndarray) -> None:
        channel.send(
            wire.WireMessage(
                wire.MSG_SMASHED_GRAD,
                msg.round,
                msg.client_id,
                [("grad", grad), ("_b", msg.get("_b"))],
            )
        )

    def _handle_per_batch(self, msg, channel) -> None:
        acts = msg.get("acts")
        labels = msg.get("_labels").astype(np.int64)
        with self._lock:
            grad, gset = _server_step(self.layers, self.params, acts, labels)
            self.params = sgd_update(self.params, gset, self.lr)
            self._update_counts[msg.round] = self._update_counts.get(msg.round, 0) + 1
        self._reply(channel, msg, grad)

    def _handle_copies(self, client_id: int, msg, channel) -> None:
        acts = msg.get("acts")
        labels = msg.get("_labels").astype(np.int64)
        if client_id not in self._copies:
            with self._lock:
                self._copies[client_id] = self.params.clone()
        local = self._copies[client_id]
        grad, gset = _server_step(self.layers, local, acts, labels)
        self._copies[client_id] = sgd_update(local, gset, self.lr)
        self._reply(channel, msg, grad)

    def finish_round(self, rnd: int) -> None:
        """sflv1: shared parameters become the weighted average of the
        per-client copies (ascending id); a client that sent no batches
        contributes the round-start state."""
        if self.mode != "copies":
            return
        with self._lock:
            parts = []
            for k in sorted(self._weights):
                parts.append((self._weights[k], self._copies.get(k, self.params)))
            merged = weighted_average_params(parts)
            merged.version = self.params.version + 1
            self.params = merged
            self._update_counts[rnd] = self._update_counts.get(rnd, 0) + 1
            self._copies = {}

    def _enqueue_stepwise(self, client_id: int, msg, channel) -> None:
        with self._cond:
            step = self._step_of.get(client_id, 0)
            self._step_of[client_id] = step + 1
            self._pending[(step, client_id)] = (msg, channel)
            self._cond.notify_all()

    def process_round(self, rnd: int, timeout: float = 120.0) -> None:
        """sflv2: drive all steps of one round; fresh permutation per step."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, rnd, 0x5F2))))
        max_steps = max(self._round_steps.values() or [0])
        for step in range(max_steps):
            active = sorted(k for k, total in self._round_steps.items() if total > step)
            deadline = time.monotonic() + timeout
            with self._cond:
                while not all((step, k) in self._pending for k in active):
                    if self._errors:
                        raise self._errors[0]
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise Timeout(f"round {rnd} step {step}: clients missing")
                    self._cond.wait(remaining)
                batch = {k: self._pending.pop((step, k)) for k in active}
            order = [active[i] for i in rng.permutation(len(active))]
            for k in order:
                msg, channel = batch[k]
                acts = msg.get("acts")
                labels = msg.get("_labels").astype(np.int64)
                grad, gset = _server_step(self.layers, self.params, acts, labels)
                self.params = sgd_update(self.params, gset, self.lr)
                self._update_counts[rnd] = self._update_counts.get(rnd, 0) + 1
                self._reply(channel, msg, grad)

    def snapshot(self) -> ParameterSet:
        with self._lock:
            return self.params.clone()

    def client_view(self, client_id: int) -> ParameterSet:
        """sflv1: the server portion as trained against this client's
        smashed data during the current round."""
        with self._lock:
            view = self._copies.get(client_id, self.params)
            return view.clone()

    def update_count(self, rnd: int) -> int:
        return self._update_counts.get(rnd, 0)

    def raise_pending_errors(self) -> None:
        if self._errors:
            raise self._errors[0]


# ---------------------------------------------------------------------------
# client workers


class _Crew:
    """Thread group that surfaces worker exceptions to the orchestrator."""

    def __init__(self):
        self.threads: list[threading.Thread] = []
        self.errors: list[BaseException] = []

    def spawn(self, fn, name: str) -> None:
        def run():
            try:
                fn()
            except BaseException as exc:
                self.errors.append(exc)

        thread = threading.Thread(target=run, name=name, daemon=True)
        thread.start()
        self.threads.append(thread)

    def check(self) -> None:
        if self.errors:
            raise self.errors[0]

    def join_quiet(self) -> None:
        for thread in self.threads:
            thread.join()


def _fl_client_loop(
    client_id: int,
    layers: list[LayerSpec],
    features: np.ndarray,
    labels: np.ndarray,
    shard: np.ndarray,
    cfg: TrainConfig,
    ctl,
) -> None:
    while True:
        msg = ctl.recv()
        if msg.msg_type == wire.MSG_CONTROL:
            return
        params = _records_to_params(msg)
        rnd = msg.round
        plan = batch_plan(shard, cfg.batch_size, cfg.seed, client_id, rnd, cfg.local_epochs)
        for epoch in plan:
            for batch_idx in epoch:
                params = _full_net_step(layers, params, features[batch_idx], labels[batch_idx], cfg.learning_rate)
                if cfg.compute_delay_s:
                    time.sleep(cfg.compute_delay_s)
        reply = wire.WireMessage(
            wire.MSG_CLIENT_UPDATE,
            rnd,
            client_id,
            _params_to_records(params) + [("_n", np.asarray([float(len(shard))]))],
        )
        ctl.send(reply)


def _split_client_loop(
    client_id: int,
    layers: list[LayerSpec],
    features: np.ndarray,
    labels: np.ndarray,
    shard: np.ndarray,
    cfg: TrainConfig,
    ctl,
    main,
) -> None:
    dp = cfg.dp if cfg.dp is not None and cfg.dp.enabled else None
    rng = client_noise_rng(cfg.seed, client_id) if dp is not None else None
    while True:
        msg = ctl.recv()
        if msg.msg_type == wire.MSG_CONTROL:
            return
        params = _records_to_params(msg)
        rnd = msg.round
        plan = batch_plan(shard, cfg.batch_size, cfg.seed, client_id, rnd, cfg.local_epochs)
        step = 0
        for epoch in plan:
            for batch_idx in epoch:
                x, y = features[batch_idx], labels[batch_idx]
                acts, caches = stack_forward(layers, params, x)
                outbound = acts
                if dp is not None and dp.smashed_dp:
                    outbound = randomize_smashed(acts, dp.smashed_epsilon, rng)
                main.send(
                    wire.WireMessage(
                        wire.MSG_SMASHED,
                        rnd,
                        client_id,
                        [
                            ("acts", outbound),
                            ("_labels", y.astype(np.float64)),
                            ("_n", np.asarray([float(len(batch_idx))])),
                            ("_b", np.asarray([float(step)])),
                        ],
                    )
                )
                reply = main.recv()
                upstream = reply.get("grad")
                if dp is not None and dp.gradient_dp:
                    per_example = per_example_gradients(
                        layers, params, x, upstream * len(batch_idx)
                    )
                    clipped = [clip_gradient(g, dp.clip_norm) for g in per_example]
                    averaged = noisy_average(
                        clipped, dp.noise_scale, dp.clip_norm, len(batch_idx), rng
                    )
                    params = sgd_update(params, averaged, cfg.learning_rate)
                else:
                    _, grads = stack_backward(
                        layers, params, caches, upstream, need_input_grad=False
                    )
                    params = sgd_update(params, grads, cfg.learning_rate)
                if cfg.compute_delay_s:
                    time.sleep(cfg.compute_delay_s)
                step += 1
        ctl.send(
            wire.WireMessage(
                wire.MSG_CLIENT_UPDATE,
                rnd,
                client_id,
                _params_to_records(params) + [("_n", np.asarray([float(len(shard))]))],
            )
        )


# ---------------------------------------------------------------------------
# orchestration


def _prepare_features(dataset: Dataset, arch: ArchitectureSpec) -> np.ndarray:
    if dataset.images.ndim == 4:
        return pad_images(dataset.images, arch.input_shape)
    if tuple(dataset.images.shape[1:]) != arch.input_shape:
        raise ShapeMismatch(
            f"dataset samples {dataset.images.shape[1:]} vs architecture input {arch.input_shape}"
        )
    return dataset.images


def _round_metrics(
    rnd: int,
    views: list[list[tuple[list[LayerSpec], ParameterSet]]],
    shards: list[Shard],
    features: np.ndarray,
    labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    wall_time: float,
    eval_batch: int,
    start_hashes: list[str] | None = None,
) -> RoundRecord:
    train_accs, test_accs = [], []
    for view, shard in zip(views, shards):
        train_accs.append(evaluate(view, features[shard.indices], labels[shard.indices], eval_batch))
        test_accs.append(evaluate(view, test_features, test_labels, eval_batch))
    mean_train = float(np.mean(train_accs))
    mean_test = float(np.mean(test_accs))
    cv_train = float(np.std(train_accs) / mean_train) if mean_train > 0 else 0.0
    cv_test = float(np.std(test_accs) / mean_test) if mean_test > 0 else 0.0
    return RoundRecord(
        rnd, train_accs, test_accs, mean_train, mean_test, cv_train, cv_test,
        wall_time, start_hashes or [],
    )


def run_protocol(
    algo: str,
    arch: ArchitectureSpec,
    cut_index: int,
    train: Dataset,
    test: Dataset,
    clients: int,
    cfg: TrainConfig,
    transport: str = "inproc",
    shards: list[Shard] | None = None,
    counter: TrafficCounter | None = None,
    trace: TraceLog | None = None,
) -> RunResult:
    """Run one engine end to end and return final parameters plus metrics."""
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm: {algo}")
    counter = counter if counter is not None else TrafficCounter()
    features = _prepare_features(train, arch)
    labels = train.labels
    test_features = _prepare_features(test, arch)
    test_labels = test.labels
    if shards is None:
        shards = partition_uniform(train, 1 if algo == "central" else clients, cfg.seed)

    if algo == "central":
        return _run_central(arch, features, labels, test_features, test_labels, shards, cfg, counter)
    if algo == "fl":
        return _run_fl(
            arch, features, labels, test_features, test_labels, shards, cfg, transport, counter, trace
        )
    return _run_split(
        algo, arch, cut_index, features, labels, test_features, test_labels, shards, cfg,
        transport, counter, trace,
    )


def _run_central(arch, features, labels, test_features, test_labels, shards, cfg, counter) -> RunResult:
    layers = list(arch.layers)
    from .models import init_params

    params = init_params(arch, cfg.seed, cfg.init_scheme)
    shard = shards[0]
    rounds = []
    for rnd in range(cfg.global_epochs):
        started = time.perf_counter()
        plan = batch_plan(shard.indices, cfg.batch_size, cfg.seed, shard.client_id, rnd, cfg.local_epochs)
        for epoch in plan:
            for batch_idx in epoch:
                params = _full_net_step(
                    layers, params, features[batch_idx], labels[batch_idx], cfg.learning_rate
                )
                if cfg.compute_delay_s:
                    time.sleep(cfg.compute_delay_s)
        wall = time.perf_counter() - started
        rounds.append(
            _round_metrics(
                rnd, [[(layers, params)]], shards, features, labels,
                test_features, test_labels, wall, cfg.eval_batch_size,
            )
        )
    return RunResult("central", params, None, None, rounds, counter, None, [], [len(s) for s in shards])


def _run_fl(arch, features, labels, test_features, test_labels, shards, cfg,
            transport, counter, trace) -> RunResult:
    from .models import init_params

    layers = list(arch.layers)
    ids = [s.client_id for s in shards]
    fabric = build_fabric(transport, ids, counter, trace, with_main=False)
    crew = _Crew()
    for shard in shards:
        ctl = fabric.client_ctl[shard.client_id]
        crew.spawn(
            lambda s=shard, c=ctl: _fl_client_loop(
                s.client_id, layers, features, labels, s.indices, cfg, c
            ),
            name=f"fl-client-{shard.client_id}",
        )
    global_params = init_params(arch, cfg.seed, cfg.init_scheme)
    rounds = []
    try:
        for rnd in range(cfg.global_epochs):
            started = time.perf_counter()
            outbound = _params_to_records(global_params)
            hashes = []
            for k in ids:
                fabric.server_ctl[k].send(wire.WireMessage(wire.MSG_GLOBAL_MODEL, rnd, k, outbound))
                hashes.append(params_hash(global_params))
            updates = []
            for k in ids:
                crew.check()
                msg = fabric.server_ctl[k].recv()
                updates.append(
                    ClientUpdateMsg(k, rnd, _records_to_params(msg), int(msg.get("_n")[0]))
                )
            wall = time.perf_counter() - started
            views = [[(layers, upd.params)] for upd in updates]
            global_params = fedavg_aggregate(updates)
            rounds.append(
                _round_metrics(
                    rnd, views, shards, features, labels, test_features, test_labels,
                    wall, cfg.eval_batch_size, hashes,
                )
            )
    finally:
        for k in ids:
            try:
                fabric.server_ctl[k].send(wire.WireMessage(wire.MSG_CONTROL, cfg.global_epochs, k))
            except Exception:
                pass
        crew.join_quiet()
        fabric.close()
    crew.check()
    return RunResult(
        "fl", global_params, None, None, rounds, counter, trace, [], [len(s) for s in shards]
    )


def _run_split(algo, arch, cut_index, features, labels, test_features, test_labels,
               shards, cfg, transport, counter, trace) -> RunResult:
    model = split_at(arch, cut_index, cfg.seed, cfg.init_scheme)
    client_layers = list(model.client_layers)
    server_layers = list(model.server_layers)
    ids = [s.client_id for s in shards]
    shard_of = {s.client_id: s for s in shards}
    total_samples = sum(len(s) for s in shards)
    fabric = build_fabric(transport, ids, counter, trace, with_main=True)
    mode = {"sl": "per_batch", "sflv1": "copies", "sflv2": "stepwise"}[algo]
    server = MainServer(server_layers, model.server_params, cfg.learning_rate, mode, cfg.seed)
    server.serve(fabric.server_main)
    crew = _Crew()
    for shard in shards:
        ctl = fabric.client_ctl[shard.client_id]
        main = fabric.client_main[shard.client_id]
        crew.spawn(
            lambda s=shard, c=ctl, m=main: _split_client_loop(
                s.client_id, client_layers, features, labels, s.indices, cfg, c, m
            ),
            name=f"{algo}-client-{shard.client_id}",
        )

    weights = {k: len(shard_of[k]) / total_samples for k in ids}
    client_global = model.client_params
    rounds = []
    updates_per_round = []
    try:
        for rnd in range(cfg.global_epochs):
            started = time.perf_counter()
            if algo == "sl":
                relay = client_global
                views = []
                hashes = []
                for k in ids:
                    hashes.append(params_hash(relay))
                    fabric.server_ctl[k].send(
                        wire.WireMessage(wire.MSG_GLOBAL_MODEL, rnd, k, _params_to_records(relay))
                    )
                    crew.check()
                    server.raise_pending_errors()
                    msg = fabric.server_ctl[k].recv()
                    relay = _records_to_params(msg)
                    views.append([(client_layers, relay), (server_layers, server.snapshot())])
                client_global = relay
            else:
                server.begin_round(
                    rnd,
                    weights=weights,
                    steps={
                        k: steps_in_plan(len(shard_of[k]), cfg.batch_size, cfg.local_epochs)
                        for k in ids
                    },
                )
                outbound = _params_to_records(client_global)
                hashes = []
                for k in ids:
                    fabric.server_ctl[k].send(
                        wire.WireMessage(wire.MSG_GLOBAL_MODEL, rnd, k, outbound)
                    )
                    hashes.append(params_hash(client_global))
                if algo == "sflv2":
                    server.process_round(rnd)
                updates = []
                for k in ids:
                    crew.check()
                    server.raise_pending_errors()
                    msg = fabric.server_ctl[k].recv()
                    updates.append(
                        ClientUpdateMsg(k, rnd, _records_to_params(msg), int(msg.get("_n")[0]))
                    )
                if algo == "sflv1":
                    views = [
                        [(client_layers, upd.params), (server_layers, server.client_view(upd.client_id))]
                        for upd in updates
                    ]
                    server.finish_round(rnd)
                else:
                    snap = server.snapshot()
                    views = [[(client_layers, upd.params), (server_layers, snap)] for upd in updates]
                client_global = fedavg_aggregate(updates)
            wall = time.perf_counter() - started
            updates_per_round.append(server.update_count(rnd))
            rounds.append(
                _round_metrics(
                    rnd, views, shards, features, labels, test_features, test_labels,
                    wall, cfg.eval_batch_size, hashes,
                )
            )
    finally:
        for k in ids:
            try:
                fabric.server_ctl[k].send(wire.WireMessage(wire.MSG_CONTROL, cfg.global_epochs, k))
            except Exception:
                pass
        crew.join_quiet()
        fabric.close()
    crew.check()
    server.raise_pending_errors()

    server_final = server.snapshot()
    full = assemble_full(arch, client_global, server_final)
    return RunResult(
        algo, full, client_global, server_final, rounds, counter, trace,
        updates_per_round, [len(s) for s in shards],
    )
