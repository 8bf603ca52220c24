"""Signal records, windowing, standardization, dataset splits and a synthetic
paired ECG/PPG generator.
"""

from __future__ import annotations

import csv
import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InsufficientDataError, LoadError, DataError

SAMPLE_RATE_HZ = 125
WINDOW_LEN = 300
MIN_RECORD_SECONDS = 8 * 60
TRAIN_SECONDS = 6.4 * 60
TEST_SECONDS = 1.6 * 60
# full-scale subject partition (train, test)
SUBJECT_PARTITION = (272, 69)


class Modality(str, Enum):
    ECG = "ECG"
    PPG = "PPG"


class SplitMode(str, Enum):
    SAMPLE_WISE = "sample-wise"
    SUBJECT_WISE = "subject-wise"


@dataclass
class SignalRecord:
    subject_id: str
    modality: Modality
    sample_rate_hz: int
    samples: np.ndarray
    record_id: str
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.modality = Modality(self.modality)
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate_hz <= 0:
            raise ConfigError(f"{self.record_id}: sample rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError(f"{self.record_id}: samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"{self.record_id}: non-finite sample values")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def meets_min_duration(self, seconds: float = MIN_RECORD_SECONDS) -> bool:
        return self.samples.size >= round(seconds * self.sample_rate_hz)


@dataclass
class PairedSegment:
    subject_id: str
    ecg: np.ndarray
    ppg: np.ndarray
    segment_index: int

    def __post_init__(self):
        if len(self.ecg) != len(self.ppg):
            raise DataError(
                f"{self.subject_id}[{self.segment_index}]: ECG and PPG windows differ in length"
            )
        if self.segment_index < 0:
            raise ConfigError("segment_index must be non-negative")


@dataclass
class DatasetSplit:
    mode: SplitMode
    train: list[PairedSegment]
    test: list[PairedSegment]
    label_map: dict[str, int]

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    def arrays(self, part: str, modality: Modality | str):
        """Stack one channel of ``train`` or ``test`` into a ``(B, L)`` float32 array.

        Returns ``(windows, labels)``; labels are -1 for subjects outside the
        training label map (unseen subjects in subject-wise mode).
        """
        segs = getattr(self, part)
        attr = Modality(modality).value.lower()
        x = np.stack([getattr(s, attr) for s in segs]).astype(np.float32)
        y = np.array([self.label_map.get(s.subject_id, -1) for s in segs], dtype=np.int64)
        return x, y

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.mode.value.encode())
        for part in (self.train, self.test):
            h.update(b"|")
            for s in part:
                h.update(f"{s.subject_id}:{s.segment_index};".encode())
                h.update(np.ascontiguousarray(s.ecg, dtype="<f8").tobytes())
                h.update(np.ascontiguousarray(s.ppg, dtype="<f8").tobytes())
        for k, v in sorted(self.label_map.items()):
            h.update(f"{k}={v}".encode())
        return h.hexdigest()


@dataclass
class SyntheticConfig:
    n_subjects: int = 20
    duration_s: float = MIN_RECORD_SECONDS
    seed: int = 0
    noise_sigma: float = 0.05
    heart_rate_range_bpm: tuple[float, float] = (55.0, 95.0)
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def validate(self):
        lo, hi = self.heart_rate_range_bpm
        if self.n_subjects <= 0:
            raise ConfigError("n_subjects must be positive")
        if self.duration_s <= 0:
            raise ConfigError("duration_s must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 40 <= lo <= hi <= 180:
            raise ConfigError("heart_rate_range_bpm must lie within [40, 180] with low <= high")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample_rate_hz must be positive")


# ---------------------------------------------------------------------------
# windowing and standardization


def segment_record(record: SignalRecord, window_len: int = WINDOW_LEN) -> np.ndarray:
    """Cut a record into consecutive non-overlapping windows.

    The trailing remainder shorter than ``window_len`` is dropped, so the
    result has shape ``(len(samples) // window_len, window_len)``.
    """
    if window_len <= 1:
        raise ConfigError(f"window_len must be >= 2, got {window_len}")
    x = np.asarray(record.samples, dtype=np.float64)
    if x.size == 0:
        raise ConfigError(f"{record.record_id}: empty record")
    n = x.size // window_len
    return x[: n * window_len].reshape(n, window_len).copy()


def standardize_window(window) -> np.ndarray:
    """Z-score a window with the population std; constant windows become zeros."""
    x = np.asarray(window, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("cannot standardize an empty window")
    if not np.all(np.isfinite(x)):
        raise DataError("window contains non-finite values")
    mu = x.mean()
    centered = x - mu
    sd = np.sqrt(np.mean(centered * centered))
    # relative tolerance: float noise on a constant window is not signal
    if sd <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(x)
    return centered / sd


def pair_records(
    records: Iterable[SignalRecord], window_len: int = WINDOW_LEN, standardize: bool = True
) -> "OrderedDict[str, list[PairedSegment]]":
    """Group records by subject and cut time-aligned ECG/PPG window pairs."""
    by_subject: OrderedDict[str, dict[Modality, SignalRecord]] = OrderedDict()
    for r in records:
        by_subject.setdefault(r.subject_id, {})[r.modality] = r
    out: OrderedDict[str, list[PairedSegment]] = OrderedDict()
    for sid, mods in by_subject.items():
        missing = [m.value for m in Modality if m not in mods]
        if missing:
            raise DataError(f"subject {sid}: missing {', '.join(missing)} record")
        ecg, ppg = mods[Modality.ECG], mods[Modality.PPG]
        if ecg.sample_rate_hz != ppg.sample_rate_hz:
            raise DataError(f"subject {sid}: ECG and PPG sample rates differ")
        n = min(ecg.samples.size, ppg.samples.size)
        ew = segment_record(_truncated(ecg, n), window_len)
        pw = segment_record(_truncated(ppg, n), window_len)
        if standardize:
            ew = np.stack([standardize_window(w) for w in ew]) if len(ew) else ew
            pw = np.stack([standardize_window(w) for w in pw]) if len(pw) else pw
        out[sid] = [PairedSegment(sid, e, p, i) for i, (e, p) in enumerate(zip(ew, pw))]
    return out


def _truncated(record: SignalRecord, n: int) -> SignalRecord:
    if record.samples.size == n:
        return record
    return SignalRecord(
        record.subject_id, record.modality, record.sample_rate_hz, record.samples[:n], record.record_id
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitParams:
    train_seconds: float = TRAIN_SECONDS
    test_seconds: float = TEST_SECONDS
    sample_rate_hz: int = SAMPLE_RATE_HZ
    window_len: int = WINDOW_LEN
    n_test_subjects: int | None = None
    seed: int = 0

    def window_counts(self) -> tuple[int, int]:
        # round first: 6.4 * 60 * 125 is not exactly representable
        n_train = int(round(self.train_seconds * self.sample_rate_hz)) // self.window_len
        n_test = int(round(self.test_seconds * self.sample_rate_hz)) // self.window_len
        return n_train, n_test

    def test_subject_count(self, n_subjects: int) -> int:
        if self.n_test_subjects is not None:
            return self.n_test_subjects
        tr, te = SUBJECT_PARTITION
        return max(1, int(round(n_subjects * te / (tr + te))))


def build_split(
    pairs: Mapping[str, Sequence[PairedSegment]],
    mode: SplitMode | str,
    params: SplitParams | None = None,
) -> DatasetSplit:
    """Partition paired segments into train/test.

    Sample-wise: every subject contributes its first ``train_seconds`` of
    windows to train and the following ``test_seconds`` to test. Subject-wise:
    a seeded random subset of subjects is held out entirely; train subjects
    contribute their train-period windows and held-out subjects their
    test-period windows.
    """
    mode = SplitMode(mode)
    params = params or SplitParams()
    n_train, n_test = params.window_counts()
    if n_train < 1 or n_test < 1:
        raise ConfigError("train/test durations must each cover at least one window")
    need = n_train + n_test
    subjects = sorted(pairs)
    for sid in subjects:
        got = len(pairs[sid])
        if got < need:
            raise InsufficientDataError(
                f"subject {sid}: {got} paired segments, need at least {need}"
            )
    ordered = {sid: sorted(pairs[sid], key=lambda s: s.segment_index) for sid in subjects}

    if mode is SplitMode.SAMPLE_WISE:
        if not subjects:
            raise InsufficientDataError("no subjects")
        train_ids, test_ids = subjects, subjects
    else:
        k = params.test_subject_count(len(subjects))
        if k < 1 or len(subjects) - k < 2:
            raise InsufficientDataError(
                f"subject-wise split of {len(subjects)} subjects with {k} held out leaves too few"
            )
        perm = np.random.default_rng(params.seed).permutation(len(subjects))
        held = {subjects[i] for i in perm[:k]}
        train_ids = [s for s in subjects if s not in held]
        test_ids = [s for s in subjects if s in held]

    train = [seg for sid in train_ids for seg in ordered[sid][:n_train]]
    test = [seg for sid in test_ids for seg in ordered[sid][n_train:need]]
    label_map = {sid: i for i, sid in enumerate(train_ids)}
    return DatasetSplit(mode, train, test, label_map)


# ---------------------------------------------------------------------------
# synthetic data

# (offset from R peak [s], amplitude, width [s]) for P, Q, R, S, T
_ECG_WAVES = np.array(
    [
        [-0.20, 0.15, 0.025],
        [-0.035, -0.15, 0.010],
        [0.0, 1.00, 0.011],
        [0.035, -0.25, 0.012],
        [0.28, 0.30, 0.050],
    ]
)


_LATENT_DIM = 4
# systolic delay, systolic width, diastolic extra delay, diastolic amplitude, diastolic width
_PPG_BASE = np.array([0.23, 0.085, 0.30, 0.40, 0.12])


def _morphology_maps(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed maps from the subject latent vector to log-scale waveform
    perturbations: 15 ECG parameters and 5 PPG parameters.

    Both maps have orthogonal columns, so distances between subjects in
    latent space carry over to either modality up to a common scale.
    """
    rng = np.random.default_rng([seed, 1_000_003])
    maps = []
    for rows in (15, 5):
        q, _ = np.linalg.qr(rng.standard_normal((rows, _LATENT_DIM)))
        maps.append(q * np.sqrt(rows / _LATENT_DIM))
    return maps[0], maps[1]


def _subject_draw(rng: np.random.Generator, cfg: SyntheticConfig, maps) -> dict:
    # one latent morphology vector drives both modalities; ECG exposes it
    # through 15 waveform parameters, PPG only through 5 and more weakly
    lo, hi = cfg.heart_rate_range_bpm
    ecg_map, ppg_map = maps
    z = rng.standard_normal(_LATENT_DIM)
    e = ecg_map @ z
    waves = _ECG_WAVES.copy()
    waves[:, 0] *= np.exp(0.10 * e[0:5])
    waves[:, 1] *= np.exp(0.30 * e[5:10])
    waves[:, 2] *= np.exp(0.20 * e[10:15])
    ppg = _PPG_BASE * np.exp(0.12 * (ppg_map @ z))
    return {
        "hr": rng.uniform(lo, hi),
        "latent": z,
        "ecg_waves": waves,
        "ppg_waves": np.array([[ppg[0], 1.0, ppg[1]], [ppg[2], ppg[3], ppg[4]]]),
        "wander_phase": rng.uniform(0, 2 * np.pi, 2),
    }


def _beat_schedule(rng: np.random.Generator, hr_bpm: float, duration_s: float) -> np.ndarray:
    rr0 = 60.0 / hr_bpm
    beats = [rng.uniform(-rr0, 0.0)]
    drift = 0.0
    while beats[-1] < duration_s + 2 * rr0:
        drift = float(np.clip(0.98 * drift + rng.normal(0.0, 0.01), -0.08, 0.08))
        beats.append(beats[-1] + rr0 * (1.0 + drift + rng.normal(0.0, 0.015)))
    return np.asarray(beats)


def _render(t: np.ndarray, centers: np.ndarray, amps: np.ndarray, width: float) -> np.ndarray:
    # each sample only sees its two nearest bumps; widths are far below the RR interval
    idx = np.clip(np.searchsorted(centers, t), 1, len(centers) - 1)
    out = np.zeros_like(t)
    for j in (idx - 1, idx):
        out += amps[j] * np.exp(-((t - centers[j]) ** 2) / (2.0 * width**2))
    return out


def generate_synthetic(config: SyntheticConfig) -> list[SignalRecord]:
    """Synthesize one ECG and one PPG record per subject on a shared beat schedule.

    ECG is a sum of five Gaussian bumps (P, Q, R, S, T) per beat and PPG a
    systolic plus diastolic bump pair per beat. Both morphologies are
    functions of one latent vector per subject, so the modalities carry
    shared subject information. The beat times (onsets) are shared by the two modalities and
    stored in ``record.meta["beat_onsets_s"]``.
    """
    config.validate()
    fs = config.sample_rate_hz
    n = int(round(config.duration_s * fs))
    t = np.arange(n) / fs
    maps = _morphology_maps(config.seed)
    records = []
    for i in range(config.n_subjects):
        rng = np.random.default_rng([config.seed, i])
        d = _subject_draw(rng, config, maps)
        beats = _beat_schedule(rng, d["hr"], config.duration_s)
        nb = len(beats)

        ecg = np.zeros(n)
        for off, amp, width in d["ecg_waves"]:
            amps = amp * (1.0 + 0.05 * rng.standard_normal(nb))
            ecg += _render(t, beats + off, amps, width)
        ecg += 0.05 * np.sin(2 * np.pi * 0.25 * t + d["wander_phase"][0])

        (sys_delay, sys_amp, sys_w), (dia_delay, dia_amp, dia_w) = d["ppg_waves"]
        pulse_amp = 1.0 + 0.05 * rng.standard_normal(nb)
        ppg = _render(t, beats + sys_delay, sys_amp * pulse_amp, sys_w)
        ppg += _render(t, beats + sys_delay + dia_delay, dia_amp * pulse_amp, dia_w)
        ppg += 0.15 * np.sin(2 * np.pi * 0.25 * t + d["wander_phase"][1])

        if config.noise_sigma > 0:
            ecg += rng.normal(0.0, config.noise_sigma, n)
            ppg += rng.normal(0.0, config.noise_sigma, n)

        sid = f"S{i:03d}"
        onsets = beats[(beats >= 0) & (beats < config.duration_s)]
        meta = {"beat_onsets_s": onsets, "heart_rate_bpm": d["hr"]}
        records.append(SignalRecord(sid, Modality.ECG, fs, ecg, f"{sid}_ECG", dict(meta)))
        records.append(SignalRecord(sid, Modality.PPG, fs, ppg, f"{sid}_PPG", dict(meta)))
    return records


# ---------------------------------------------------------------------------
# file I/O

MANIFEST_COLUMNS = ("subject_id", "modality", "sample_rate_hz", "path")


def read_signal_file(path: Path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".f32":
        raw = path.read_bytes()
        if len(raw) % 4:
            raise LoadError(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if suffix == ".txt":
        values = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    values.append(float(line))
                except ValueError:
                    raise LoadError(f"{path}:{lineno}: unreadable value {line!r}") from None
        return np.asarray(values, dtype=np.float64)
    raise LoadError(f"{path}: unsupported extension {suffix!r} (expected .f32 or .txt)")


def write_signal_file(path: Path, samples) -> None:
    np.ascontiguousarray(samples, dtype="<f4").tofile(path)


def _read_manifest(manifest: Path) -> list[dict]:
    text = Path(manifest).read_text()
    delim = "\t" if "\t" in text.splitlines()[0] else ","
    rows = list(csv.DictReader(text.splitlines(), delimiter=delim))
    if not rows:
        raise LoadError(f"{manifest}: manifest has no records")
    missing = [c for c in MANIFEST_COLUMNS if c not in rows[0]]
    if missing:
        raise LoadError(f"{manifest}: missing columns {missing}")
    return rows


def load_records(root_path, manifest=None) -> list[SignalRecord]:
    """Load every record listed in a manifest, in manifest order.

    ``manifest`` defaults to ``root_path/manifest.csv``; relative signal paths
    resolve against ``root_path``. ECG and PPG records of one subject are
    truncated to the shorter of the two so paired windows stay aligned.
    """
    root = Path(root_path)
    manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    if not manifest.exists():
        raise LoadError(f"manifest not found: {manifest}")

    records = []
    for row in _read_manifest(manifest):
        sid, path = row["subject_id"].strip(), Path(row["path"].strip())
        try:
            modality = Modality(row["modality"].strip().upper())
            rate = int(row["sample_rate_hz"])
        except ValueError as exc:
            raise LoadError(f"record {sid}/{row['modality']}: {exc}") from None
        rid = f"{sid}_{modality.value}"
        full = path if path.is_absolute() else root / path
        if not full.exists():
            raise LoadError(f"record {rid}: file not found: {full}")
        samples = read_signal_file(full)
        try:
            records.append(SignalRecord(sid, modality, rate, samples, rid))
        except (DataError, ConfigError) as exc:
            raise LoadError(f"record {rid}: {exc}") from None

    per_subject: dict[str, dict[Modality, SignalRecord]] = {}
    for r in records:
        per_subject.setdefault(r.subject_id, {})[r.modality] = r
    for sid, mods in per_subject.items():
        missing = [m.value for m in Modality if m not in mods]
        if missing:
            raise LoadError(f"subject {sid}: no {' or '.join(missing)} record in manifest")
    lengths = {sid: min(r.samples.size for r in mods.values()) for sid, mods in per_subject.items()}
    return [_truncated(r, lengths[r.subject_id]) for r in records]


def write_dataset(records: Sequence[SignalRecord], out_dir) -> Path:
    """Write ``.f32`` signal files plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            name = f"{r.record_id}.f32"
            write_signal_file(out / name, r.samples)
            w.writerow([r.subject_id, r.modality.value, r.sample_rate_hz, name])
    return manifest


def minutes_to_windows(minutes: float, sample_rate_hz: int = SAMPLE_RATE_HZ, window_len: int = WINDOW_LEN) -> int:
    return int(round(minutes * 60 * sample_rate_hz)) // window_len


def required_segments(params: SplitParams | None = None) -> int:
    params = params or SplitParams()
    return sum(params.window_counts())
