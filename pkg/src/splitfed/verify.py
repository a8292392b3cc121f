"""Built-in verification suites behind the `verify` CLI subcommand.

Each suite returns (passed, report lines). They mirror the package's
core guarantees: the K=1 equivalence oracle, DP noise statistics, codec
round-trips, finite-difference gradient checks, and measured-vs-analytic
communication.
"""

from __future__ import annotations

import numpy as np

from .costs import CostInputs, analytic_costs, compare_measured
from .data import synthetic
from .models import build_architecture, model_stats, split_at
from .nn import (
    GradientSet,
    LayerSpec,
    ParameterSet,
    init_layer_params,
    layer_backward,
    layer_forward,
    params_allclose,
)
from .privacy import DpRng, clip_gradient, noisy_average, randomize_smashed
from .protocols import TrainConfig, run_protocol
from .transport import TrafficCounter
from . import wire

SUITES = ("oracle", "dp", "codec", "gradcheck", "comm")


def _line(ok: bool, text: str) -> str:
    return f"[{'PASS' if ok else 'FAIL'}] {text}"


# ---------------------------------------------------------------------------


def run_oracle_suite(seed: int = 7) -> tuple[bool, list[str]]:
    """K=1: sl/sflv2 bit-identical to centralized SGD, sflv1 bit-identical
    in the single-batch configuration, fl within 1e-9 relative."""
    train = synthetic(256, 16, 4, seed)
    test = synthetic(128, 16, 4, seed ^ 0x7E57, center_seed=seed)
    arch = build_architecture("mlp2", (16,), 4)
    lines = []
    ok = True

    cfg = TrainConfig(learning_rate=0.05, batch_size=64, global_epochs=3, seed=seed)
    reference = run_protocol("central", arch, 1, train, test, 1, cfg)
    for algo, tol in (("sl", 0.0), ("sflv2", 0.0), ("fl", 1e-9)):
        result = run_protocol(algo, arch, 1, train, test, 1, cfg)
        good = params_allclose(reference.final_params, result.final_params, tol)
        ok &= good
        label = "bit-identical" if tol == 0.0 else f"within {tol:g} relative"
        lines.append(_line(good, f"K=1 {algo} vs centralized ({label})"))

    single = TrainConfig(learning_rate=0.05, batch_size=256, global_epochs=3, seed=seed)
    ref_single = run_protocol("central", arch, 1, train, test, 1, single)
    res_single = run_protocol("sflv1", arch, 1, train, test, 1, single)
    good = params_allclose(ref_single.final_params, res_single.final_params, 0.0)
    ok &= good
    lines.append(_line(good, "K=1 sflv1 (single batch per epoch) vs centralized (bit-identical)"))
    return ok, lines


# ---------------------------------------------------------------------------


def run_dp_suite(seed: int = 11, draws: int = 100_000) -> tuple[bool, list[str]]:
    lines = []
    ok = True

    rng = DpRng(seed)
    sigma, clip = 1.3, 1.0
    n_examples = 64
    template = GradientSet([("w", np.zeros(1))])
    clipped = [template for _ in range(n_examples)]
    trials = draws // n_examples
    outs = np.empty(trials)
    for i in range(trials):
        outs[i] = noisy_average(clipped, sigma, clip, n_examples, rng).entries[0][1][0]
    var_ratio = outs.var() / (sigma**2 * clip**2 / n_examples)
    good = abs(var_ratio - 1.0) < 0.05
    ok &= good
    lines.append(_line(good, f"gaussian mechanism variance ratio {var_ratio:.4f} (want 1 +/- 0.05)"))

    rng2 = DpRng(seed + 1)
    acts = np.zeros((draws, 1))
    acts[0, 0] = 0.0
    acts[1, 0] = 1.0  # interval 1 -> scale 1/eps'
    noisy = randomize_smashed(acts, 1.0, rng2)
    mad = np.abs(noisy - acts).mean()
    good = abs(mad - 1.0) < 0.05
    ok &= good
    lines.append(_line(good, f"laplace mechanism mean |noise| {mad:.4f} (want 1 +/- 0.05)"))

    gen = np.random.Generator(np.random.PCG64(seed))
    good = True
    for _ in range(50):
        grads = GradientSet([("a", gen.normal(size=7)), ("b", gen.normal(size=(3, 2)))])
        norm = clip_gradient(grads, 0.5).l2_norm()
        good &= norm <= 0.5 + 1e-12
    ok &= good
    lines.append(_line(good, "post-clip norms <= C' + 1e-12"))
    return ok, lines


# ---------------------------------------------------------------------------


def run_codec_suite(seed: int = 3, count: int = 1000) -> tuple[bool, list[str]]:
    gen = np.random.Generator(np.random.PCG64(seed))
    ok = True
    for _ in range(count):
        records = []
        for r in range(gen.integers(0, 4)):
            rank = int(gen.integers(0, 4))
            shape = tuple(int(gen.integers(1, 5)) for _ in range(rank))
            name = ("_" if gen.random() < 0.3 else "") + f"rec{r}"
            records.append((name, gen.normal(size=shape)))
        msg = wire.WireMessage(
            int(gen.choice([1, 2, 3, 4, 5])),
            int(gen.integers(0, 1000)),
            int(gen.integers(0, 64)),
            records,
        )
        back = wire.decode(wire.encode(msg))
        same = (
            back.msg_type == msg.msg_type
            and back.round == msg.round
            and back.client_id == msg.client_id
            and len(back.records) == len(msg.records)
            and all(
                a[0] == b[0] and np.array_equal(a[1], b[1])
                for a, b in zip(back.records, msg.records)
            )
        )
        ok &= same
    return ok, [_line(ok, f"{count} random message round-trips bit-exact")]


# ---------------------------------------------------------------------------


def _random_layer_instances(seed: int):
    gen = np.random.Generator(np.random.PCG64(seed))
    cases = [
        (LayerSpec("dense", "d", in_features=5, out_features=4), (3, 5)),
        (LayerSpec("conv2d", "c", in_channels=2, out_channels=3, kernel=3), (2, 6, 6, 2)),
        (LayerSpec("conv2d", "cp", in_channels=1, out_channels=2, kernel=3, stride=2, pad=1), (2, 7, 7, 1)),
        (LayerSpec("maxpool2d", "mp", pool=2), (2, 4, 4, 3)),
        (LayerSpec("avgpool2d", "ap", pool=2), (2, 4, 4, 3)),
        (LayerSpec("relu", "r"), (4, 6)),
        (LayerSpec("tanh", "t"), (4, 6)),
        (LayerSpec("flatten", "f"), (3, 2, 2, 2)),
    ]
    return gen, cases


def gradcheck_layer(layer: LayerSpec, x_shape, gen, step: float = 1e-6) -> float:
    """Max relative error of analytic vs central-difference gradients for
    the probe s(theta) = sum(forward(theta) * R)."""
    x = gen.uniform(-1, 1, size=x_shape)
    params = ParameterSet(init_layer_params(layer, gen))
    for _, value in params.entries:
        value += gen.uniform(-0.1, 0.1, size=value.shape)
    probe = gen.uniform(-1, 1, size=layer_forward(layer, x, params).shape)

    def score(x_val, params_val):
        return float(np.sum(layer_forward(layer, x_val, params_val) * probe))

    dx, dparams = layer_backward(layer, x, probe, params)
    worst = 0.0

    def compare(analytic, mutate):
        nonlocal worst
        flat = analytic.reshape(-1)
        for idx in range(flat.size):
            plus = mutate(idx, step)
            minus = mutate(idx, -step)
            fd = (plus - minus) / (2 * step)
            denom = max(abs(fd), abs(flat[idx]), 1e-6)
            worst = max(worst, abs(fd - flat[idx]) / denom)

    def mutate_x(idx, delta):
        bumped = x.copy().reshape(-1)
        bumped[idx] += delta
        return score(bumped.reshape(x.shape), params)

    compare(dx, mutate_x)
    for entry_idx, (_, grad) in enumerate(dparams.entries):
        def mutate_p(idx, delta, entry_idx=entry_idx):
            clone = params.clone()
            clone.entries[entry_idx][1].reshape(-1)[idx] += delta
            return score(x, clone)

        compare(grad, mutate_p)
    return worst


def run_gradcheck_suite(seed: int = 5, instances: int = 5) -> tuple[bool, list[str]]:
    gen, cases = _random_layer_instances(seed)
    lines = []
    ok = True
    for layer, shape in cases:
        worst = max(gradcheck_layer(layer, shape, gen) for _ in range(instances))
        good = worst < 1e-4
        ok &= good
        lines.append(_line(good, f"{layer.kind}: max relative error {worst:.3e} < 1e-4"))
    return ok, lines


# ---------------------------------------------------------------------------


def run_comm_suite(seed: int = 13) -> tuple[bool, list[str]]:
    """Measured per-client elements per round must equal the analytic
    formulas exactly, for K in {1, 5, 10} on mlp2."""
    lines = []
    ok = True
    arch = build_architecture("mlp2", (16,), 4)
    test = synthetic(40, 16, 4, seed ^ 0x7E57, center_seed=seed)
    for clients in (1, 5, 10):
        n = 200  # divisible by every K so shards are even
        train = synthetic(n, 16, 4, seed)
        cfg = TrainConfig(learning_rate=0.05, batch_size=10, global_epochs=2, seed=seed)
        model = split_at(arch, 1, seed)
        stats = model_stats(model)
        inputs = CostInputs(
            clients=clients,
            data_size=n,
            smashed_size=stats.smashed_size,
            param_count=stats.total_params,
            client_fraction=stats.client_fraction,
        )
        table = analytic_costs(inputs)
        for algo in ("fl", "sl", "sflv1", "sflv2"):
            counter = TrafficCounter()
            run_protocol(algo, arch, 1, train, test, clients, cfg, counter=counter)
            row = compare_measured(table, algo, counter, clients, cfg.global_epochs)
            good = row.deviation == 0.0
            ok &= good
            lines.append(
                _line(
                    good,
                    f"K={clients} {algo}: measured {row.measured_per_client:.1f} "
                    f"vs analytic {row.analytic_per_client:.1f} (deviation {row.deviation:.2e})",
                )
            )
    return ok, lines


def run_suite(name: str) -> tuple[bool, list[str]]:
    if name == "oracle":
        return run_oracle_suite()
    if name == "dp":
        return run_dp_suite()
    if name == "codec":
        return run_codec_suite()
    if name == "gradcheck":
        return run_gradcheck_suite()
    if name == "comm":
        return run_comm_suite()
    raise ValueError(f"unknown suite: {name} (choose from {SUITES})")
