"""Secure summation of shared updates, client-side averaging, and the
adaptive server optimizer, plus the plaintext baseline pipelines.

The optimizer runs on the publicly revealed per-round aggregate: the
aggregate is revealed to every client each round anyway, so post-processing
it in the clear leaks nothing extra and keeps the shared computation purely
linear. The plaintext single-server pipeline quantizes updates through the
same codec so its output is bit-identical to the secure path.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .field import FieldParams, FixedPointCodec
from .fedcore import (
    ModelSpec,
    Population,
    TrainConfig,
    init_weights,
    local_train,
    select_cohort,
)
from .sharing import AuthShare, SharingError
from .util import derive_seed


@dataclass(frozen=True)
class OptimizerState:
    """First/second moment state of the server-side adaptive update."""

    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    eta: float = 0.1
    round_index: int = 0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta parameters must lie in [0, 1)")
        if self.tau <= 0 or self.eta <= 0:
            raise ValueError("tau and eta must be positive")
        if np.any(self.v < 0):
            raise ValueError("second moment must be non-negative")

    @classmethod
    def zeros(cls, dim: int, **kwargs) -> "OptimizerState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), **kwargs)


def adaptive_step(w_prev: np.ndarray, delta: np.ndarray, state: OptimizerState):
    """Moment-based server update: m,v track delta; w moves by eta*m/(sqrt(v)+tau)."""
    if not (np.all(np.isfinite(w_prev)) and np.all(np.isfinite(delta))):
        raise ValueError("non-finite optimizer input")
    m = state.beta1 * state.m + (1.0 - state.beta1) * delta
    v = state.beta2 * state.v + (1.0 - state.beta2) * delta**2
    w = w_prev + state.eta * m / (np.sqrt(v) + state.tau)
    return w, replace(state, m=m, v=v, round_index=state.round_index + 1)


def update_global_model(om_prev, average, state: OptimizerState, mode: str):
    """One server-side round update in the selected optimizer mode."""
    if mode == "adaptive":
        return adaptive_step(om_prev, average - om_prev, state)
    if mode == "fedavg":
        w = om_prev + state.eta * (average - om_prev)
        return w, replace(state, round_index=state.round_index + 1)
    if mode == "plain":
        return average, replace(state, round_index=state.round_index + 1)
    raise ValueError(f"unknown optimizer mode {mode!r}")


def server_aggregate_shares(client_vectors: list, params: FieldParams) -> list:
    """Component-wise sum of the clients' authenticated share vectors.

    Purely local to one server: coefficients are all one, no communication.
    """
    if not client_vectors:
        raise SharingError("empty cohort")
    dim = len(client_vectors[0])
    if any(len(vec) != dim for vec in client_vectors):
        raise SharingError("dimension mismatch across client vectors")
    q = params.q
    out = []
    for i in range(dim):
        value = sum(vec[i].value_share for vec in client_vectors) % q
        mac = sum(vec[i].mac_share for vec in client_vectors) % q
        out.append(AuthShare(value, mac))
    return out


def client_average(opened: list, cohort_size: int, codec: FixedPointCodec) -> np.ndarray:
    """Decode the opened sum and divide by the cohort size in the reals."""
    if cohort_size < 1:
        raise ValueError("cohort size must be positive")
    return codec.decode_vector(opened) / cohort_size


# ---------------------------------------------------------------------------
# Plaintext baselines / parity oracles
# ---------------------------------------------------------------------------


@dataclass
class OracleRun:
    om_history: list  # om_0 .. om_t (quantized)
    individual_updates: dict  # (client_id, round) -> quantized update vector
    cohorts: dict  # round -> client id list


def train_cohort_updates(
    population: Population,
    cfg: TrainConfig,
    spec: ModelSpec,
    om_prev: np.ndarray,
    round_index: int,
    cohort: list,
    seed: int,
) -> dict:
    """Local training for one round's cohort with per-(round, client) seeds."""
    updates = {}
    for j in cohort:
        client = population.clients[j]
        updates[j] = local_train(
            om_prev,
            client.round_features[round_index - 1],
            client.round_gaze[round_index - 1],
            cfg,
            spec,
            derive_seed(seed, "train", round_index, j),
        )
    return updates


def aggregate_encoded(encoded_updates: list, params: FieldParams) -> list:
    """Field sum of encoded update vectors (the plaintext twin of sharing)."""
    dim = len(encoded_updates[0])
    return [sum(vec[i] for vec in encoded_updates) % params.q for i in range(dim)]


def plaintext_adaptive_fl_oracle(
    population: Population,
    cfg: TrainConfig,
    spec: ModelSpec,
    codec: FixedPointCodec,
    seed: int,
    optimizer: OptimizerState = None,
    optimizer_mode: str = "adaptive",
) -> OracleRun:
    """Single-server pipeline, numerically identical to the secure path."""
    state = optimizer or OptimizerState.zeros(spec.dim)
    om = codec.quantize(init_weights(spec, derive_seed(seed, "init")))
    history = [om]
    ius = {}
    cohorts = {}
    for k in range(1, cfg.rounds + 1):
        cohort = select_cohort(population.num_clients, cfg.cohort_fraction, k, seed)
        cohorts[k] = cohort
        updates = train_cohort_updates(population, cfg, spec, om, k, cohort, seed)
        encoded = [codec.encode_vector(updates[j]) for j in cohort]
        for j, enc in zip(cohort, encoded):
            ius[(j, k)] = codec.decode_vector(enc)
        total = aggregate_encoded(encoded, codec.params)
        average = client_average(total, len(cohort), codec)
        raw, state = update_global_model(om, average, state, optimizer_mode)
        om = codec.quantize(raw)
        history.append(om)
    return OracleRun(om_history=history, individual_updates=ius, cohorts=cohorts)


def plaintext_datacentre_oracle(
    population: Population,
    cfg: TrainConfig,
    spec: ModelSpec,
    seed: int,
    epochs: int = None,
) -> np.ndarray:
    """Pooled-data training run; the accuracy upper-line baseline."""
    X = np.concatenate(
        [x for client in population.clients for x in client.round_features]
    )
    G = np.concatenate(
        [g for client in population.clients for g in client.round_gaze]
    )
    pooled_cfg = TrainConfig(
        epochs=epochs if epochs is not None else cfg.epochs * cfg.rounds,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        rounds=cfg.rounds,
        cohort_fraction=cfg.cohort_fraction,
    )
    w0 = init_weights(spec, derive_seed(seed, "init"))
    return local_train(w0, X, G, pooled_cfg, spec, derive_seed(seed, "datacentre"))
