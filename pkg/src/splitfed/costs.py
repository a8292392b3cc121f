"""Analytic per-round cost table and comparison against measured traffic.

Communication terms are element counts (parameters or activations per
global epoch); the training-time rows mix an abstract per-epoch compute
time t, an SL hand-off wait T, and aggregation-latency terms
proportional to parameter counts, evaluated symbolically as written.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidInputs, MissingRun

METHODS = ("fl", "sl", "sflv1", "sflv2")


@dataclass(frozen=True)
class CostInputs:
    clients: int          # K
    data_size: float      # p: samples per global epoch across all clients
    smashed_size: float   # q: activation elements per sample at the cut
    param_count: float    # |W|
    client_fraction: float  # beta
    train_time: float = 1.0  # t
    wait_time: float = 0.0   # T

    def validate(self) -> None:
        if self.clients < 1:
            raise InvalidInputs("K must be >= 1")
        if not 0 < self.client_fraction < 1:
            raise InvalidInputs(f"beta={self.client_fraction} must lie strictly in (0, 1)")
        if min(self.data_size, self.smashed_size, self.param_count) <= 0:
            raise InvalidInputs("p, q and |W| must be positive")
        if self.train_time < 0 or self.wait_time < 0:
            raise InvalidInputs("t and T must be non-negative")


@dataclass(frozen=True)
class MethodCost:
    comms_per_client: float
    total_comms: float
    total_train_time: float
    total_cost: float


def analytic_costs(inputs: CostInputs) -> dict[str, MethodCost]:
    inputs.validate()
    k = inputs.clients
    p, q = inputs.data_size, inputs.smashed_size
    w, beta = inputs.param_count, inputs.client_fraction
    t, big_t = inputs.train_time, inputs.wait_time
    split_per_client = (2 * p / k) * q + 2 * beta * w
    split_total = 2 * p * q + 2 * beta * k * w
    return {
        "fl": MethodCost(2 * w, 2 * k * w, t + k * w, t + 3 * k * w),
        "sl": MethodCost(
            split_per_client,
            split_total,
            t * k + big_t * (k - 1),
            split_total + t * k + big_t * (k - 1),
        ),
        "sflv1": MethodCost(
            split_per_client, split_total, t + k * w, 2 * p * q + t + (1 + 2 * beta) * k * w
        ),
        "sflv2": MethodCost(
            split_per_client, split_total, t + beta * k * w, 2 * p * q + t + 3 * beta * k * w
        ),
    }


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    analytic_per_client: float
    measured_per_client: float
    deviation: float


def compare_measured(
    costs: dict[str, MethodCost],
    method: str,
    counter,
    clients: int,
    rounds: int,
) -> ComparisonRow:
    """Relative deviation of measured per-client elements per global epoch
    (uploads + downloads, labels and control metadata excluded) from the
    analytic comms_per_client."""
    if rounds < 1 or clients < 1:
        raise MissingRun("no completed rounds to compare")
    total = 0
    for k in range(clients):
        tally = counter.totals(k)
        total += tally["up_elements"] + tally["down_elements"]
    if total == 0:
        raise MissingRun("traffic counter is empty")
    measured = total / clients / rounds
    analytic = costs[method].comms_per_client
    return ComparisonRow(method, analytic, measured, (measured - analytic) / analytic)


def format_cost_table(inputs: CostInputs, costs: dict[str, MethodCost]) -> str:
    header = (
        f"K={inputs.clients} p={inputs.data_size:g} q={inputs.smashed_size:g} "
        f"|W|={inputs.param_count:g} beta={inputs.client_fraction:g} "
        f"t={inputs.train_time:g} T={inputs.wait_time:g}"
    )
    lines = [header, ""]
    lines.append(f"{'method':<8}{'comms/client':>16}{'total comms':>16}{'train time':>16}{'total cost':>16}")
    for method in METHODS:
        row = costs[method]
        lines.append(
            f"{method:<8}{row.comms_per_client:>16.6g}{row.total_comms:>16.6g}"
            f"{row.total_train_time:>16.6g}{row.total_cost:>16.6g}"
        )
    return "\n".join(lines)


def cost_table_csv(costs: dict[str, MethodCost]) -> str:
    lines = ["method,comms_per_client,total_comms,total_train_time,total_cost"]
    for method in METHODS:
        row = costs[method]
        lines.append(
            f"{method},{row.comms_per_client!r},{row.total_comms!r},"
            f"{row.total_train_time!r},{row.total_cost!r}"
        )
    return "\n".join(lines)
