"""Annotation sessions: state, the per-round refinement pipeline, the store.

A refinement round runs the full chain on the session state:
geodesic supervision weights from the cumulative scribbles, probability-guided
pruning of the initial labels, training-set assembly with dynamic class
balancing, online training of the likelihood network, whole-volume inference,
and graph-cut regularization.  Rounds are deterministic given the session
seed and round number: every random stream is derived from
``(seed, round, stage)``.
"""

from __future__ import annotations

import dataclasses
import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geodesic import GeodesicConfig, WeightMap, scribble_weights
from .graphcut import GraphCutConfig, graphcut_refine
from .grid import LabelMap, ProbMap, ScribbleSet, Volume, normalize_volume
from .metrics import EvalReport, assd, dice
from .model import (
    LikelihoodModel,
    ModelConfig,
    build_training_set,
    prune_labels,
    train_online,
)

_STAGE_PRUNE = 1
_STAGE_TRAIN = 2
_MODEL_INIT = 0xA


class SessionBusyError(RuntimeError):
    """A refine was requested while another one is in flight on the session."""


@dataclass(frozen=True)
class RefineSettings:
    """Pipeline knobs; the defaults are the tuned operating point."""

    tau: float = 0.3
    connectivity: int = 26
    passes: int = 4
    spatial_weight: float = 0.0
    zeta: float = 0.8
    eta: float = 0.98
    lam: float = 2.5
    sigma: float = 0.15
    epochs: int | None = None  # None: model config value
    lr: float | None = None

    def merged(self, overrides: dict | None) -> "RefineSettings":
        if not overrides:
            return self
        values = {k: v for k, v in overrides.items() if v is not None}
        unknown = set(values) - {f for f in self.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown refine settings: {sorted(unknown)}")
        return dataclasses.replace(self, **values)

    def geodesic(self) -> GeodesicConfig:
        return GeodesicConfig(
            tau=self.tau,
            connectivity=self.connectivity,
            passes=self.passes,
            spatial_weight=self.spatial_weight,
        )

    def graphcut(self) -> GraphCutConfig:
        return GraphCutConfig(lam=self.lam, sigma=self.sigma)


class Session:
    """One interactive annotation session; all mutation goes through methods."""

    def __init__(
        self,
        volume: Volume,
        initial_labels: LabelMap,
        initial_probs: ProbMap,
        *,
        session_id: str | None = None,
        model: LikelihoodModel | None = None,
        config: ModelConfig | None = None,
        seed: int = 0,
        ground_truth: LabelMap | None = None,
        settings: RefineSettings = RefineSettings(),
    ):
        if initial_labels.dims != volume.dims or initial_probs.dims != volume.dims:
            raise ValidationError("initial labels/probabilities dims do not match the volume")
        if ground_truth is not None and ground_truth.dims != volume.dims:
            raise ValidationError("ground truth dims do not match the volume")
        self.id = session_id or uuid.uuid4().hex
        self.volume = normalize_volume(volume)
        self.initial_labels = initial_labels
        self.initial_probs = initial_probs
        self.ground_truth = ground_truth
        self.scribbles = ScribbleSet(volume.dims)
        self.seed = int(seed)
        cfg = config or ModelConfig(seed=self.seed)
        self.model = model if model is not None else LikelihoodModel(
            cfg, rng=np.random.default_rng([self.seed, _MODEL_INIT])
        )
        self.settings = settings
        self.result_labels: LabelMap | None = None
        self.result_probs: ProbMap | None = None
        self.round = 0
        self.reports: list[EvalReport] = []
        self.last_touch = time.monotonic()
        self._lock = threading.Lock()
        self._scribble_version = 0
        self._weight_cache: tuple[tuple, WeightMap] | None = None

    # --- bookkeeping -----------------------------------------------------------

    def touch(self) -> None:
        self.last_touch = time.monotonic()

    @property
    def status(self) -> str:
        return "refining" if self._lock.locked() else "idle"

    @property
    def current_labels(self) -> LabelMap:
        return self.result_labels if self.result_labels is not None else self.initial_labels

    def add_scribbles(self, additions: ScribbleSet) -> tuple[int, int]:
        """Merge scribbles in (last write wins) and return cumulative counts."""
        self.scribbles.update(additions)
        self._scribble_version += 1
        return len(self.scribbles.foreground), len(self.scribbles.background)

    def apply_scribble_edit(self, additions: ScribbleSet, erased: list[int]) -> tuple[int, int]:
        """Erase first, then merge additions; returns cumulative counts."""
        for idx in erased:
            self.scribbles.remove(idx)
        return self.add_scribbles(additions)

    def weight_map(self, settings: RefineSettings | None = None) -> WeightMap:
        """Current geodesic weight map, cached per scribble version and config."""
        settings = settings or self.settings
        key = (
            self._scribble_version,
            settings.tau,
            settings.connectivity,
            settings.passes,
            settings.spatial_weight,
        )
        if self._weight_cache is None or self._weight_cache[0] != key:
            wmap = scribble_weights(self.volume, self.scribbles, settings.geodesic())
            self._weight_cache = (key, wmap)
        return self._weight_cache[1]

    # --- the refinement round ----------------------------------------------------

    def refine(self, overrides: dict | None = None) -> tuple[EvalReport, int]:
        """Run one refinement round; raises SessionBusyError if one is running."""
        if not self._lock.acquire(blocking=False):
            raise SessionBusyError(f"session {self.id} is already refining")
        try:
            return self._refine_round(self.settings.merged(overrides))
        finally:
            self._lock.release()

    def _refine_round(self, settings: RefineSettings) -> tuple[EvalReport, int]:
        round_no = self.round + 1

        t0 = time.perf_counter()
        wmap = self.weight_map(settings)
        t_weights = time.perf_counter() - t0

        rng_prune = np.random.default_rng([self.seed, round_no, _STAGE_PRUNE])
        kept = prune_labels(self.initial_labels, self.initial_probs, settings.zeta, settings.eta, rng_prune)
        samples = build_training_set(self.initial_labels, kept, self.scribbles, wmap)

        t0 = time.perf_counter()
        rng_train = np.random.default_rng([self.seed, round_no, _STAGE_TRAIN])
        train_online(
            self.model, self.volume, samples, rng_train,
            epochs=settings.epochs, lr=settings.lr,
        )
        t_train = time.perf_counter() - t0

        t0 = time.perf_counter()
        probs, _ = self.model.infer_volume(self.volume)
        t_infer = time.perf_counter() - t0

        t0 = time.perf_counter()
        labels = graphcut_refine(probs, self.volume, self.scribbles, settings.graphcut())
        t_graphcut = time.perf_counter() - t0

        changed = int(np.count_nonzero(labels.labels != self.current_labels.labels))
        self.result_labels = labels
        self.result_probs = probs
        self.round = round_no

        report = EvalReport(
            round=round_no,
            scribble_voxels=len(self.scribbles),
            t_weights=t_weights,
            t_train=t_train,
            t_infer=t_infer,
            t_graphcut=t_graphcut,
        )
        if self.ground_truth is not None:
            report.dice = dice(labels, self.ground_truth)
            if labels.labels.any() and self.ground_truth.labels.any():
                report.assd = assd(labels, self.ground_truth, self.volume.spacing)
        self.reports.append(report)
        self.touch()
        return report, changed

    def initial_report(self) -> EvalReport:
        """Round-0 record: the initial segmentation before any refinement."""
        report = EvalReport(round=0, scribble_voxels=len(self.scribbles))
        if self.ground_truth is not None:
            report.dice = dice(self.initial_labels, self.ground_truth)
            if self.initial_labels.labels.any() and self.ground_truth.labels.any():
                report.assd = assd(self.initial_labels, self.ground_truth, self.volume.spacing)
        return report


class SessionStore:
    """In-memory session registry with lazy idle expiry."""

    def __init__(self, ttl_seconds: float = 3600.0):
        self.ttl_seconds = ttl_seconds
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def _expire(self) -> None:
        now = time.monotonic()
        stale = [
            sid
            for sid, sess in self._sessions.items()
            if now - sess.last_touch > self.ttl_seconds and sess.status == "idle"
        ]
        for sid in stale:
            del self._sessions[sid]

    def add(self, session: Session) -> Session:
        with self._lock:
            self._expire()
            self._sessions[session.id] = session
        return session

    def get(self, session_id: str) -> Session:
        with self._lock:
            self._expire()
            if session_id not in self._sessions:
                raise KeyError(session_id)
            session = self._sessions[session_id]
        session.touch()
        return session

    def delete(self, session_id: str) -> None:
        with self._lock:
            if session_id not in self._sessions:
                raise KeyError(session_id)
            del self._sessions[session_id]

    def __len__(self) -> int:
        return len(self._sessions)
