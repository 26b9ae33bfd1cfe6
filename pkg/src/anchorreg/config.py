"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .compat import RansacEstimator, SC2Estimator
from .features import DescriptorConfig
from .fgcm import ClusteringConfig, MiningConfig
from .geometry import DistanceBin, SyntheticPairSpec
from .losses import TrainingConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or a value outside its valid range."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    out: str = "out"
    # synthetic corpus
    count: int = 10
    overlap: float = 0.5
    crop_mode: str = "half-space"
    periodic_period: float = 10.0
    periodic_duty: float = 0.7
    max_rotation: float = 30.0
    max_translation: float = 10.0
    min_translation: float = 5.0
    noise_sigma: float = 0.01
    scene_points: int = 6000
    # geometry and features
    voxel: float = 0.3
    sparse_factor: float = 2.0
    descriptor_radius: float = 1.0
    d_out: int = 16
    max_matches: int = 2000
    # estimator
    estimator: str = "sc2"
    tau_c: float = 0.6
    ransac_iters: int = 2000
    # mining
    top_k: int = 50
    max_iters: int = 8
    seed_threshold: float = 0.7
    seed_max_pairs: int = 400
    adapt_steps: int = 10
    adapt_lr: float = 0.05
    sparse_radius: float = 0.6
    # training
    epochs: int = 20
    lr: float = 1e-3
    lambda_corr: float = 1.0
    lambda_1: float = 0.5
    n_p: int = 128
    temperature: float = 0.07
    margin_pos: float = 0.1
    margin_neg: float = 1.4
    # metrics
    rre_thresh: float = 5.0
    rte_thresh: float = 2.0
    ir_thresh: float = 0.6
    bins: str = "5-10,10-20,20-30,30-40,40-50"

    # ---- derived module configs; each constructor validates its own range

    def pair_spec(self) -> SyntheticPairSpec:
        return SyntheticPairSpec(
            overlap_target=self.overlap,
            crop_mode=self.crop_mode,
            periodic_period=self.periodic_period,
            periodic_duty=self.periodic_duty,
            pose_magnitude=(self.max_rotation, self.max_translation),
            noise_sigma=self.noise_sigma,
            min_translation=self.min_translation,
        )

    def descriptor(self) -> DescriptorConfig:
        return DescriptorConfig(radius=self.descriptor_radius)

    def mining(self) -> MiningConfig:
        clustering = ClusteringConfig(
            top_k=self.top_k,
            max_iters=self.max_iters,
            seed_similarity_threshold=self.seed_threshold,
            n_p=self.n_p,
        )
        return MiningConfig(
            clustering=clustering,
            adapt_steps=self.adapt_steps,
            adapt_lr=self.adapt_lr,
            temperature=self.temperature,
            base_voxel=self.voxel,
            sparse_factor=self.sparse_factor,
            sparse_radius=self.sparse_radius,
            seed_max_pairs=self.seed_max_pairs,
            rng_seed=self.seed,
        )

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            epochs=self.epochs,
            lr=self.lr,
            lambda_corr=self.lambda_corr,
            lambda_1=self.lambda_1,
            n_p=self.n_p,
            temperature=self.temperature,
            margin_pos=self.margin_pos,
            margin_neg=self.margin_neg,
            ir_threshold=self.ir_thresh,
            rng_seed=self.seed,
        )

    def make_estimator(self):
        if self.estimator == "sc2":
            return SC2Estimator(self.tau_c)
        return RansacEstimator(self.tau_c, self.ransac_iters, self.seed)

    def distance_bins(self) -> list[DistanceBin]:
        out = []
        for part in self.bins.split(","):
            lo, sep, hi = part.strip().partition("-")
            if not sep:
                raise ConfigError(f"bins: {part!r} is not of the form lo-hi")
            try:
                out.append(DistanceBin(float(lo), float(hi)))
            except ValueError as err:
                raise ConfigError(f"bins: {err}") from err
        return out

    def validate(self) -> "RunConfig":
        """Raise :class:`ConfigError` on the first invalid value."""
        positive = (
            "voxel", "descriptor_radius", "tau_c", "adapt_lr", "sparse_radius", "temperature",
            "rre_thresh", "rte_thresh", "ir_thresh",
        )
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        at_least_one = ("jobs", "adapt_steps", "n_p", "max_matches", "seed_max_pairs", "ransac_iters")
        for key in at_least_one:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be at least 1")
        for key in ("count", "epochs", "seed", "scene_points"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("lr", "lambda_corr", "lambda_1", "margin_pos"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.margin_neg <= self.margin_pos:
            raise ConfigError("margin_neg must exceed margin_pos")
        if self.sparse_factor <= 1:
            raise ConfigError("sparse_factor must exceed 1")
        if not 2 <= self.d_out <= 33:
            raise ConfigError("d_out must lie in [2, 33]")
        if self.estimator not in ("sc2", "ransac"):
            raise ConfigError(f"estimator must be 'sc2' or 'ransac', not {self.estimator!r}")
        self.distance_bins()
        try:
            self.pair_spec()
            self.mining()
            self.training()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    kind = type(getattr(RunConfig(), key))
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key = value")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (``None`` entries are ignored), then validation."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    return replace(RunConfig(), **values).validate()
