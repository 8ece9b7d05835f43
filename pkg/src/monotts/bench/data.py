"""Synthetic phoneme-to-frame alignment task and stress inputs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import BundleFormatError, ConfigError

DATASET_FORMAT = "monotts-dataset"
DATASET_VERSION = 1
MAX_VALUES = 2**31
STRESS_KINDS = ("very_short", "very_long", "repeated_symbol")


@dataclass(frozen=True)
class ToyTaskSpec:
    """Each symbol owns ``frames_per_symbol`` (+/- jitter) consecutive frames
    of its prototype vector plus Gaussian noise.

    Prototypes come from ``prototype_seed`` so training and held-out sets
    drawn with different ``seed`` values share them.
    """

    vocab_size: int = 32
    j_min: int = 5
    j_max: int = 20
    frames_per_symbol: int = 4
    jitter: int = 0
    mel_dim: int = 16
    noise_std: float = 0.02
    seed: int = 0
    count: int = 1000
    prototype_seed: int = 1234

    def __post_init__(self):
        if self.vocab_size < 1 or self.mel_dim < 1 or self.count < 1:
            raise ConfigError("vocab_size, mel_dim and count must be >= 1")
        if not 1 <= self.j_min <= self.j_max:
            raise ConfigError(f"need 1 <= j_min <= j_max, got {self.j_min}, {self.j_max}")
        if self.frames_per_symbol < 1:
            raise ConfigError(f"frames_per_symbol must be >= 1, got {self.frames_per_symbol}")
        if not 0 <= self.jitter < self.frames_per_symbol:
            raise ConfigError(f"jitter must be in [0, frames_per_symbol), got {self.jitter}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        worst = (self.frames_per_symbol + self.jitter) * self.j_max * self.count * self.mel_dim
        if worst > MAX_VALUES:
            raise ConfigError(f"dataset could hold {worst} values, above the {MAX_VALUES} limit")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ToyTaskSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ToyTaskSpec":
        return ToyTaskSpec(**{**self.to_dict(), **changes})


@dataclass
class Utterance:
    ids: np.ndarray  # (J,) int64
    mel: np.ndarray  # (T, mel_dim) float32
    durations: np.ndarray  # (J,) frames per symbol

    @property
    def J(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return len(self.mel)

    def boundaries(self) -> np.ndarray:
        """Frame index (0-based, exclusive) where each symbol ends."""
        return np.cumsum(self.durations)


@dataclass
class ToyDataset:
    spec: ToyTaskSpec
    prototypes: np.ndarray
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i) -> Utterance:
        return self.utterances[i]

    def buckets(self) -> dict[tuple[int, int], list[int]]:
        """Utterance indices grouped by ``(J, T)`` so batches need no padding."""
        out: dict[tuple[int, int], list[int]] = {}
        for i, u in enumerate(self.utterances):
            out.setdefault((u.J, u.T), []).append(i)
        return dict(sorted(out.items()))

    def save(self, path: str | Path) -> None:
        """Write ``manifest.json`` + little-endian float32 ``frames.bin``."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries, offset = [], 0
        for u in self.utterances:
            entries.append({"ids": u.ids.tolist(), "durations": u.durations.tolist(), "offset": offset, "frames": u.T})
            offset += u.T * self.spec.mel_dim
        manifest = {
            "format": DATASET_FORMAT,
            "version": DATASET_VERSION,
            "dtype": "<f4",
            "spec": self.spec.to_dict(),
            "prototypes_offset": offset,
            "utterances": entries,
        }
        blob = np.concatenate([u.mel.reshape(-1) for u in self.utterances] + [self.prototypes.reshape(-1)])
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        (path / "frames.bin").write_bytes(blob.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "ToyDataset":
        path = Path(path)
        try:
            manifest = json.loads((path / "manifest.json").read_text())
            blob = np.frombuffer((path / "frames.bin").read_bytes(), dtype="<f4")
        except (OSError, json.JSONDecodeError) as exc:
            raise BundleFormatError(f"cannot read dataset at {path}: {exc}") from exc
        if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
            raise BundleFormatError(f"{path} is not a version-{DATASET_VERSION} dataset")
        spec = ToyTaskSpec.from_dict(manifest["spec"])
        m = spec.mel_dim
        utts = []
        for e in manifest["utterances"]:
            mel = blob[e["offset"]:e["offset"] + e["frames"] * m].reshape(e["frames"], m).astype(np.float32)
            utts.append(Utterance(np.array(e["ids"], dtype=np.int64), mel, np.array(e["durations"], dtype=np.int64)))
        po = manifest["prototypes_offset"]
        protos = blob[po:po + spec.vocab_size * m].reshape(spec.vocab_size, m).astype(np.float32)
        return cls(spec, protos, utts)


def make_prototypes(spec: ToyTaskSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.prototype_seed)
    return rng.uniform(0.0, 1.0, size=(spec.vocab_size, spec.mel_dim)).astype(np.float32)


def render(ids: np.ndarray, durations: np.ndarray, prototypes: np.ndarray, noise_std: float, rng) -> np.ndarray:
    clean = np.repeat(prototypes[ids], durations, axis=0)
    if noise_std == 0:
        return clean.astype(np.float32)
    return (clean + rng.normal(0.0, noise_std, size=clean.shape)).astype(np.float32)


def generate_toy_dataset(spec: ToyTaskSpec) -> ToyDataset:
    """Deterministic in ``spec``: same spec, same arrays."""
    protos = make_prototypes(spec)
    rng = np.random.default_rng(spec.seed)
    k, jit = spec.frames_per_symbol, spec.jitter
    utts = []
    for _ in range(spec.count):
        J = int(rng.integers(spec.j_min, spec.j_max + 1))
        ids = rng.integers(0, spec.vocab_size, size=J).astype(np.int64)
        if jit:
            durations = (k + rng.integers(-jit, jit + 1, size=J)).astype(np.int64)
        else:
            durations = np.full(J, k, dtype=np.int64)
        utts.append(Utterance(ids, render(ids, durations, protos, spec.noise_std, rng), durations))
    return ToyDataset(spec, protos, utts)


def utterance_for(ids, spec: ToyTaskSpec, seed: int = 0) -> Utterance:
    """Noise-free-duration rendering of arbitrary ids under ``spec``."""
    ids = np.asarray(ids, dtype=np.int64)
    durations = np.full(len(ids), spec.frames_per_symbol, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return Utterance(ids, render(ids, durations, make_prototypes(spec), spec.noise_std, rng), durations)


@dataclass
class StressSuite:
    kind: str
    inputs: list[np.ndarray]


def stress_suite(kind: str, spec: ToyTaskSpec = ToyTaskSpec(), count: int = 6, seed: int = 0) -> StressSuite:
    """Synthetic inputs probing skip/repeat failure modes.

    ``very_short`` cycles J = 1, 2, 3 (always including a single symbol);
    ``very_long`` uses ten times the longest training length;
    ``repeated_symbol`` repeats one id ``j_max`` times.
    """
    if kind not in STRESS_KINDS:
        raise ConfigError(f"unknown stress suite {kind!r}; expected one of {STRESS_KINDS}")
    if count < 1:
        raise ConfigError("stress suite count must be >= 1")
    rng = np.random.default_rng([seed, STRESS_KINDS.index(kind)])
    inputs = []
    for n in range(count):
        if kind == "very_short":
            J = 1 + n % 3
            inputs.append(rng.integers(0, spec.vocab_size, size=J).astype(np.int64))
        elif kind == "very_long":
            inputs.append(rng.integers(0, spec.vocab_size, size=10 * spec.j_max).astype(np.int64))
        else:
            sym = int(rng.integers(0, spec.vocab_size))
            inputs.append(np.full(spec.j_max, sym, dtype=np.int64))
    return StressSuite(kind, inputs)
