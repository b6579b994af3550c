"""In-process federation: party actors and a server exchanging bytes.

The trust boundary is taken seriously even though everything runs in one
process: parties serialize every outbound message, the server only ever
parses those payloads, and hash-key material is derived from a seed the
server never sees. A tap on the channel lets tests inspect exactly what
crossed the boundary.
"""

from __future__ import annotations

import queue
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .baselines import (
    NoisyHistogram,
    ind_lap,
    ldp_agg_2pest,
    ldp_decode,
    ldp_encode_batch,
    noisy_histogram,
    report_to_json,
    reports_from_jsonl,
)
from .clustering import (
    LocalModel,
    WeightedPoints,
    assign_nearest,
    dplloyd,
    dplsf,
    vscore,
    weighted_kmeans,
)
from .core import (
    BudgetLedger,
    BudgetSplit,
    ConfigInvalid,
    IdMismatch,
    InvalidParameter,
    PrivacyBudget,
    Seed,
    split_budget,
)
from .data import DatasetView
from .metrics import RunReport, normalized_loss, rel_intersection_error
from .rng import StreamKey, derive_keys, derive_seed
from .sketch import Partition, SketchParams, SketchSet, dpfmps_gen
from .weights import (
    SigmaModel,
    UpdateSchedule,
    WeightGrid,
    auto_kprime,
    basic_est,
    two_phase_est,
)

ESTIMATORS = ("DPFMPS-Basic", "DPFMPS-2P", "IND-LAP",
              "LDP-AGG", "LDP-AGG-2P", "NON-PRIVATE")
_SKETCH = {"DPFMPS-Basic", "DPFMPS-2P"}
_LDP = {"LDP-AGG", "LDP-AGG-2P"}
LOCAL_ALGS = ("dplsf", "dplloyd")

MSG_COUNT = "count-response"
MSG_CENTERS = "centers"
MSG_ENCODING = "membership-encoding"

_CENTERS_HEADER = struct.Struct("<QQ")
_COUNT_PAYLOAD = struct.Struct("<d")


@dataclass(frozen=True)
class RunConfig:
    """One protocol run's knobs; serializable as flat JSON.

    local_k is an integer or "auto"; frac is the budget share left to the
    parties (the rest pays the count query). LDP estimators must run at
    frac=1; every other private estimator needs frac<1 because the server has
    to learn a noisy user count.
    """

    estimator: str
    k: int
    local_k: int | str
    epsilon: float = 1.0
    delta: float | None = None
    frac: float = 0.98
    rows: int = 4096
    gamma: float = 1.0
    local_alg: str = "dplsf"
    sweeps: int | None = None
    random_pairs: bool = False
    single_thread: bool = False

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ConfigInvalid(f"unknown estimator {self.estimator!r}")
        if self.k < 1:
            raise ConfigInvalid(f"k must be >= 1, got {self.k}")
        if self.local_alg not in LOCAL_ALGS:
            raise ConfigInvalid(f"unknown local_alg {self.local_alg!r}")
        if isinstance(self.local_k, str):
            if self.local_k != "auto":
                raise ConfigInvalid("local_k must be an integer or 'auto'")
            if self.estimator in _LDP or self.estimator == "NON-PRIVATE":
                raise ConfigInvalid(
                    f"local_k='auto' needs the count query and the sketch noise "
                    f"model; {self.estimator} provides neither")
        elif self.local_k < 2:
            raise ConfigInvalid(f"local_k must be >= 2, got {self.local_k}")
        if self.rows < 1 or not (self.gamma > 0):
            raise ConfigInvalid("rows must be >= 1 and gamma positive")
        if self.estimator == "NON-PRIVATE":
            return
        if not (self.epsilon > 0):
            raise ConfigInvalid("private runs need epsilon > 0")
        if self.delta is None or not (0 < self.delta < 1):
            raise ConfigInvalid("private runs need delta in (0,1)")
        if self.estimator in _LDP:
            if self.frac != 1.0:
                raise ConfigInvalid(
                    f"{self.estimator} spends nothing on a count query; set frac=1")
        elif not (0 < self.frac < 1):
            raise ConfigInvalid(
                f"{self.estimator} needs a count-query budget; set frac in (0,1)")

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator, "k": self.k, "local_k": self.local_k,
            "epsilon": self.epsilon, "delta": self.delta, "frac": self.frac,
            "rows": self.rows, "gamma": self.gamma, "local_alg": self.local_alg,
            "sweeps": self.sweeps, "random_pairs": self.random_pairs,
            "single_thread": self.single_thread,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ConfigInvalid(f"unknown config keys: {sorted(extra)}")
        if "estimator" not in obj or "k" not in obj or "local_k" not in obj:
            raise ConfigInvalid("config needs estimator, k and local_k")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class ProtocolMessage:
    """One serialized party-to-server message."""

    kind: str
    sender: int
    payload: bytes
    byte_len: int

    def __post_init__(self):
        if self.byte_len != len(self.payload):
            raise InvalidParameter("byte_len must match the payload")


def _msg(kind: str, sender: int, payload: bytes) -> ProtocolMessage:
    return ProtocolMessage(kind=kind, sender=sender, payload=payload,
                           byte_len=len(payload))


def estimate_n(true_n: int, eps_count: float, seed: Seed) -> float:
    """Noisy user count, floored at 1 to keep downstream divisions defined."""
    if not (eps_count > 0):
        raise InvalidParameter(f"eps_count must be positive, got {eps_count}")
    noise = StreamKey.from_seed(seed, b"federation.count").laplace(
        1.0 / eps_count, 0)
    return max(1.0, float(true_n) + noise)


def _pack_centers(centers: np.ndarray) -> bytes:
    head = _CENTERS_HEADER.pack(centers.shape[0], centers.shape[1])
    return head + centers.astype("<f8").tobytes()


def _unpack_centers(payload: bytes) -> np.ndarray:
    k, m = _CENTERS_HEADER.unpack_from(payload)
    body = np.frombuffer(payload, dtype="<f8", offset=_CENTERS_HEADER.size)
    if body.size != k * m:
        raise InvalidParameter("centers payload has the wrong size")
    return body.reshape(k, m).copy()


@dataclass
class PartyState:
    """One party's private state; raw data never leaves this object."""

    index: int
    view: DatasetView
    seed: Seed
    split: BudgetSplit | None
    hash_keys: list | None

    def noisy_count(self) -> ProtocolMessage:
        nhat = estimate_n(self.view.n, self.split.eps_count,
                          derive_seed(self.seed, b"count"))
        return _msg(MSG_COUNT, self.index, _COUNT_PAYLOAD.pack(nhat))

    def local_cluster(self, config: RunConfig, local_k: int,
                      ledger: BudgetLedger) -> tuple:
        if config.estimator == "NON-PRIVATE":
            wp = WeightedPoints(self.view.matrix, np.ones(self.view.n))
            centers = weighted_kmeans(wp, local_k,
                                      derive_seed(self.seed, b"local-kmeans"))
            labels = assign_nearest(self.view.matrix, centers)
            model = LocalModel(centers=centers,
                               partition=Partition.from_labels(self.view.ids, labels))
        elif config.local_alg == "dplsf":
            model = dplsf(self.view.matrix, self.view.ids, local_k,
                          self.split.eps_cluster,
                          derive_seed(self.seed, b"local-cluster"),
                          ledger=ledger, party=self.index)
        else:
            model = dplloyd(self.view.matrix, self.view.ids, local_k,
                            self.split.eps_cluster,
                            derive_seed(self.seed, b"local-cluster"),
                            ledger=ledger, party=self.index)
        return model, _msg(MSG_CENTERS, self.index, _pack_centers(model.centers))

    def encode(self, config: RunConfig, model: LocalModel,
               ledger: BudgetLedger) -> ProtocolMessage:
        labels = assign_nearest(self.view.matrix, model.centers)
        if config.estimator == "NON-PRIVATE":
            payload = labels.astype("<u8").tobytes()
        elif config.estimator in _SKETCH:
            params = SketchParams.from_budget(
                config.rows, config.gamma, self.split.eps_encode,
                self.split.delta_encode)
            ss = dpfmps_gen(self.view.matrix, self.view.id64, model.centers,
                            params, self.hash_keys,
                            derive_seed(self.seed, b"encode"), party=self.index)
            ledger.spend(self.index, "sketch.encode",
                         self.split.eps_encode, self.split.delta_encode)
            payload = ss.to_bytes()
        elif config.estimator == "IND-LAP":
            hist = noisy_histogram(labels, model.centers.shape[0],
                                   self.split.eps_encode,
                                   derive_seed(self.seed, b"encode"),
                                   ledger=ledger, party=self.index)
            payload = (struct.pack("<Q", hist.counts.size)
                       + hist.counts.astype("<f8").tobytes())
        else:
            reports = ldp_encode_batch(labels, model.centers.shape[0],
                                       self.split.eps_encode,
                                       derive_seed(self.seed, b"encode"),
                                       party=self.index, ledger=ledger)
            payload = "\n".join(report_to_json(r) for r in reports).encode()
        return _msg(MSG_ENCODING, self.index, payload)


@dataclass
class ServerState:
    """Everything the server accumulates; never any hash-key material."""

    nhat: float | None = None
    centers_by_party: dict = field(default_factory=dict)
    encodings: dict = field(default_factory=dict)
    grid: WeightGrid | None = None
    final_centers: np.ndarray | None = None


def _run_phase(workers: list, single_thread: bool) -> list:
    """Run callables (one per party), collect results sorted by party index."""
    if single_thread:
        results = [w() for w in workers]
    else:
        out: queue.Queue = queue.Queue()
        threads = [threading.Thread(target=lambda w=w: out.put(w()))
                   for w in workers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        results = [out.get_nowait() for _ in workers]
    return sorted(results, key=lambda pair: pair[0])


def _true_grid(views: list, local_models: list) -> WeightGrid:
    dims = tuple(m.centers.shape[0] for m in local_models)
    labels = [assign_nearest(v.matrix, m.centers)
              for v, m in zip(views, local_models)]
    flat = np.ravel_multi_index(labels, dims)
    counts = np.bincount(flat, minlength=int(np.prod(dims))).astype(float)
    n = float(views[0].n)
    return WeightGrid(dims=dims, weights=counts.reshape(dims), total=n)


def _estimate_grid(config: RunConfig, server: ServerState,
                   schedule: UpdateSchedule) -> WeightGrid:
    est = config.estimator
    parties = sorted(server.encodings)
    if est == "NON-PRIVATE":
        labels = [np.frombuffer(server.encodings[p], dtype="<u8").astype(np.int64)
                  for p in parties]
        dims = tuple(server.centers_by_party[p].shape[0] for p in parties)
        flat = np.ravel_multi_index(labels, dims)
        counts = np.bincount(flat, minlength=int(np.prod(dims))).astype(float)
        server.nhat = float(labels[0].size)
        return WeightGrid(dims=dims, weights=counts.reshape(dims),
                          total=server.nhat)
    if est in _SKETCH:
        sketches = [SketchSet.from_bytes(server.encodings[p]) for p in parties]
        params = sketches[0].params
        if est == "DPFMPS-Basic":
            return basic_est(server.nhat, params, sketches)
        return two_phase_est(server.nhat, params, sketches, schedule)
    if est == "IND-LAP":
        hists = []
        for p in parties:
            payload = server.encodings[p]
            (k,) = struct.unpack_from("<Q", payload)
            counts = np.frombuffer(payload, dtype="<f8", offset=8)
            if counts.size != k:
                raise InvalidParameter("histogram payload has the wrong size")
            hists.append(NoisyHistogram(counts=counts.copy(), eps=0.0))
        return ind_lap(server.nhat, hists)
    reports = [reports_from_jsonl(server.encodings[p].decode()) for p in parties]
    server.nhat = float(len(reports[0]))
    local_k = server.centers_by_party[parties[0]].shape[0]
    eps = config.epsilon * config.frac / (2 * len(parties))
    if est == "LDP-AGG":
        return ldp_decode(server.nhat, reports, eps, local_k)
    return ldp_agg_2pest(server.nhat, reports, eps, local_k, schedule)


def run_protocol(config: RunConfig, views: list, seed: Seed,
                 true_labels=None, ledger: BudgetLedger | None = None,
                 message_tap=None):
    """Execute one end-to-end run; returns (final centers, RunReport).

    Parties run concurrently (threads) unless config.single_thread; either
    way messages are processed in party order, so results are identical.
    true_labels, when given, adds a V-score against the generating classes.
    message_tap, when given, sees every ProtocolMessage that crossed the
    boundary.
    """
    t_start = time.perf_counter()
    config.validate()
    if len(views) < 2:
        raise ConfigInvalid("need at least 2 party views")
    for v in views[1:]:
        if v.ids != views[0].ids:
            raise IdMismatch("party views disagree on user ids or row order")
    parties = len(views)
    n = views[0].n
    if ledger is None:
        ledger = BudgetLedger()
    private = config.estimator != "NON-PRIVATE"
    split = None
    if private:
        budget = PrivacyBudget(config.epsilon, config.delta)
        split = split_budget(budget, parties, config.frac)
    shared_secret = derive_seed(seed, b"federation.shared-secret")
    hash_keys = (derive_keys(shared_secret, config.rows)
                 if config.estimator in _SKETCH else None)
    states = [
        PartyState(index=i, view=views[i],
                   seed=derive_seed(seed, b"federation.party-%d" % i),
                   split=split, hash_keys=hash_keys)
        for i in range(parties)
    ]
    messages: list = []

    def deliver(m: ProtocolMessage) -> None:
        messages.append(m)
        if message_tap is not None:
            message_tap(m)

    server = ServerState()

    # noisy count first so an auto local_k can be broadcast before clustering
    if private and split.eps_count > 0:
        chosen = StreamKey.from_seed(seed, b"federation.count-party").randint(
            parties, 0)
        m = states[chosen].noisy_count()
        ledger.spend(chosen, "count-query", split.eps_count)
        deliver(m)
        (server.nhat,) = _COUNT_PAYLOAD.unpack(m.payload)
    elif not private:
        server.nhat = float(n)

    if config.local_k == "auto":
        model = SigmaModel(rows=config.rows, eps_encode=split.eps_encode,
                           delta=config.delta)
        local_k = auto_kprime(server.nhat, config.k, parties, model)
    else:
        local_k = config.local_k

    lock = threading.Lock()

    def cluster_work(st: PartyState):
        local_ledger = BudgetLedger()
        model, m = st.local_cluster(config, local_k, local_ledger)
        with lock:
            ledger.entries.extend(local_ledger.entries)
        return st.index, (model, m)

    clustered = _run_phase([lambda st=st: cluster_work(st) for st in states],
                           config.single_thread)
    local_models = []
    for idx, (model, m) in clustered:
        local_models.append(model)
        deliver(m)
        server.centers_by_party[idx] = _unpack_centers(m.payload)

    def encode_work(st: PartyState):
        local_ledger = BudgetLedger()
        m = st.encode(config, local_models[st.index], local_ledger)
        with lock:
            ledger.entries.extend(local_ledger.entries)
        return st.index, m

    encoded = _run_phase([lambda st=st: encode_work(st) for st in states],
                         config.single_thread)
    for idx, m in encoded:
        deliver(m)
        server.encodings[idx] = m.payload

    schedule = UpdateSchedule(sweeps=config.sweeps,
                              random_pairs=config.random_pairs,
                              seed=derive_seed(seed, b"federation.pair-order")
                              if config.random_pairs else None)
    server.grid = _estimate_grid(config, server, schedule)

    order = sorted(server.centers_by_party)
    dims = server.grid.dims
    idx = np.indices(dims).reshape(parties, -1)
    grid_points = np.hstack([
        server.centers_by_party[p][idx[i]] for i, p in enumerate(order)])
    server.final_centers = weighted_kmeans(
        WeightedPoints(grid_points, server.grid.weights.ravel()), config.k,
        derive_seed(seed, b"federation.server-kmeans"))

    if private:
        ledger.assert_within(budget)

    full = np.hstack([v.matrix for v in views])
    loss = normalized_loss(full, server.final_centers)
    truth = _true_grid(views, local_models)
    rel_err = rel_intersection_error(server.grid, truth)
    score = None
    if true_labels is not None:
        score = vscore(true_labels, assign_nearest(full, server.final_centers))
    bytes_per_party = [0] * parties
    for m in messages:
        bytes_per_party[m.sender] += m.byte_len
    report = RunReport(
        normalized_loss=loss,
        vscore=score,
        rel_intersection_error=rel_err,
        bytes_per_party=tuple(bytes_per_party),
        wall_time_sec=time.perf_counter() - t_start,
        config=config.to_dict(),
        seed=seed.value,
    )
    return server.final_centers, report
