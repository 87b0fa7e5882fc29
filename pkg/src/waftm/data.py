"""Feature ingestion, manifests, batching, and the synthetic benchmark task.

Feature files use the WFTF container: magic "WFTF", u32 version, u32 row
count, u32 width, then row-major 64-bit little-endian floats. Manifests are
JSON: {"modalities": [{"name", "dim"}], "videos": [{"id", "features":
{name: path}, "captions": [...]}]}. Feature paths are resolved relative to
the manifest's directory unless absolute.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tokenizer as tok

WFTF_MAGIC = b"WFTF"
WFTF_VERSION = 1
MAX_FRAMES = 200  # overlong feature sequences are strided down to this


class DataError(ValueError):
    """Malformed feature file, manifest, or record."""


# ---------------------------------------------------------------------------
# WFTF feature container


def write_features(path, mat: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(mat, dtype=np.float64))
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"feature matrix must be [m >= 1, dim >= 1], got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature matrix contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(WFTF_MAGIC)
        fh.write(struct.pack("<III", WFTF_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f8").tobytes())


def _read_header(fh, path) -> tuple[int, int]:
    head = fh.read(16)
    if len(head) < 16:
        raise DataError(f"truncated feature file {path}: header incomplete")
    if head[:4] != WFTF_MAGIC:
        raise DataError(f"bad magic in {path}: {head[:4]!r}")
    version, m, dim = struct.unpack("<III", head[4:])
    if version != WFTF_VERSION:
        raise DataError(f"unsupported WFTF version {version} in {path}")
    if m < 1 or dim < 1:
        raise DataError(f"degenerate shape [{m}, {dim}] in {path}")
    return m, dim


def read_feature_dims(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        m, dim = _read_header(fh, path)
        body = fh.read(8 * m * dim)
        if len(body) != 8 * m * dim:
            raise DataError(f"truncated feature file {path}: expected {m}x{dim} floats")
        mat = np.frombuffer(body, dtype="<f8").reshape(m, dim).copy()
    if not np.all(np.isfinite(mat)):
        raise DataError(f"non-finite values in {path}")
    return mat


def subsample_rows(mat: np.ndarray, cap: int = MAX_FRAMES) -> np.ndarray:
    if mat.shape[0] <= cap:
        return mat
    stride = -(-mat.shape[0] // cap)
    return mat[::stride]


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Modality:
    name: str
    dim: int


@dataclass(frozen=True)
class FeatureRecord:
    video_id: str
    features: tuple[np.ndarray, ...]  # one matrix per modality, manifest order


@dataclass(frozen=True)
class CaptionRecord:
    video_id: str
    captions: tuple[str, ...]


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    feature_paths: dict[str, str]  # modality name -> path as written in JSON
    captions: tuple[str, ...]


@dataclass(frozen=True)
class Manifest:
    modalities: tuple[Modality, ...]
    videos: tuple[VideoEntry, ...]
    base_dir: str = "."
    name: str = ""
    split: str = ""

    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise DataError(message)


def load_manifest(path) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    _require(isinstance(raw, dict), f"manifest {path}: top level must be an object")
    extra = set(raw) - {"modalities", "videos", "name", "split"}
    _require(not extra, f"manifest {path}: unknown keys {sorted(extra)}")
    _require("modalities" in raw and "videos" in raw,
             f"manifest {path}: requires 'modalities' and 'videos'")

    mods = []
    for entry in raw["modalities"]:
        _require(isinstance(entry, dict) and set(entry) == {"name", "dim"},
                 f"manifest {path}: modality entries need exactly name/dim")
        _require(int(entry["dim"]) >= 1, f"modality {entry['name']}: dim must be >= 1")
        mods.append(Modality(name=str(entry["name"]), dim=int(entry["dim"])))
    _require(len(mods) >= 1, f"manifest {path}: at least one modality required")
    _require(len({m.name for m in mods}) == len(mods),
             f"manifest {path}: duplicate modality names")

    base_dir = os.path.dirname(os.path.abspath(path))
    videos = []
    seen = set()
    for entry in raw["videos"]:
        _require(isinstance(entry, dict) and set(entry) == {"id", "features", "captions"},
                 f"manifest {path}: video entries need exactly id/features/captions")
        vid = str(entry["id"])
        _require(vid not in seen, f"duplicate video id {vid!r}")
        seen.add(vid)
        caps = tuple(str(c) for c in entry["captions"])
        _require(len(caps) >= 1 and all(c.strip() for c in caps),
                 f"video {vid!r}: needs at least one non-empty caption")
        paths = {str(k): str(v) for k, v in entry["features"].items()}
        _require(set(paths) == {m.name for m in mods},
                 f"video {vid!r}: feature keys {sorted(paths)} do not match "
                 f"declared modalities {sorted(m.name for m in mods)}")
        videos.append(VideoEntry(video_id=vid, feature_paths=paths, captions=caps))

    manifest = Manifest(
        modalities=tuple(mods), videos=tuple(videos), base_dir=base_dir,
        name=str(raw.get("name", "")), split=str(raw.get("split", "")),
    )
    for video in manifest.videos:
        for mod in manifest.modalities:
            fpath = manifest.resolve(video.feature_paths[mod.name])
            _require(os.path.exists(fpath),
                     f"video {video.video_id!r}: feature file missing: {fpath}")
            _, dim = read_feature_dims(fpath)
            _require(dim == mod.dim,
                     f"video {video.video_id!r}: modality {mod.name!r} declares "
                     f"dim {mod.dim} but file has dim {dim}")
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    payload = {
        "modalities": [{"name": m.name, "dim": m.dim} for m in manifest.modalities],
        "videos": [
            {"id": v.video_id, "features": dict(sorted(v.feature_paths.items())),
             "captions": list(v.captions)}
            for v in manifest.videos
        ],
    }
    if manifest.name:
        payload["name"] = manifest.name
    if manifest.split:
        payload["split"] = manifest.split
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_video(manifest: Manifest, video: VideoEntry) -> tuple[FeatureRecord, CaptionRecord]:
    mats = []
    for mod in manifest.modalities:
        mat = read_features(manifest.resolve(video.feature_paths[mod.name]))
        mats.append(subsample_rows(mat))
    return (FeatureRecord(video_id=video.video_id, features=tuple(mats)),
            CaptionRecord(video_id=video.video_id, captions=video.captions))


def reference_map(manifest: Manifest) -> dict[str, list[str]]:
    return {v.video_id: list(v.captions) for v in manifest.videos}


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    video_ids: list[str]
    features: list[np.ndarray]       # per modality: [B, m_max, dim]
    feature_valid: list[np.ndarray]  # per modality: [B, m_max] bool
    token_seqs: list[tok.TokenSeq]
    sampled_captions: list[str]

    def __len__(self) -> int:
        return len(self.video_ids)

    def sample_features(self, i: int) -> list[np.ndarray]:
        return [f[i] for f in self.features]

    def sample_valid(self, i: int) -> list[np.ndarray]:
        return [v[i] for v in self.feature_valid]


def make_batch(records: list[tuple[FeatureRecord, CaptionRecord]],
               vocab: tok.Vocabulary, max_len: int,
               rng: np.random.Generator) -> Batch:
    _require(len(records) >= 1, "cannot build an empty batch")
    n_mod = len(records[0][0].features)
    feats, valid = [], []
    for k in range(n_mod):
        mats = [rec.features[k] for rec, _ in records]
        m_max = max(m.shape[0] for m in mats)
        dim = mats[0].shape[1]
        block = np.zeros((len(records), m_max, dim))
        mask = np.zeros((len(records), m_max), dtype=bool)
        for i, mat in enumerate(mats):
            block[i, : mat.shape[0]] = mat
            mask[i, : mat.shape[0]] = True
        feats.append(block)
        valid.append(mask)

    ids, seqs, sampled = [], [], []
    for rec, caps in records:
        ids.append(rec.video_id)
        choice = caps.captions[int(rng.integers(len(caps.captions)))]
        sampled.append(choice)
        seqs.append(tok.encode(choice, vocab, max_len))
    return Batch(video_ids=ids, features=feats, feature_valid=valid,
                 token_seqs=seqs, sampled_captions=sampled)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seed: int = 0
    vocab_words: int = 50
    min_len: int = 3
    max_len: int = 8
    modality_dims: tuple[int, ...] = (32, 32)
    noise_std: float = 0.1
    n_train: int = 300
    n_val: int = 30
    parity_split: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        if self.vocab_words < 2 or self.min_len < 1 or self.max_len < self.min_len:
            raise DataError("synthetic spec needs vocab_words >= 2 and a valid length range")
        if self.n_train < 1 or self.n_val < 0 or self.noise_std < 0:
            raise DataError("synthetic spec needs n_train >= 1, n_val >= 0, noise_std >= 0")
        if self.parity_split and len(self.modality_dims) != 2:
            raise DataError("parity_split requires exactly two modalities")

    def words(self) -> list[str]:
        width = len(str(self.vocab_words - 1))
        return [f"w{i:0{width}d}" for i in range(self.vocab_words)]


def synthetic_embeddings(spec: SyntheticTaskSpec) -> list[np.ndarray]:
    """The fixed per-modality word embeddings used by generate_synthetic."""
    emb_seed, _ = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(emb_seed)
    return [rng.normal(size=(spec.vocab_words, d)) for d in spec.modality_dims]


def generate_synthetic(spec: SyntheticTaskSpec, out_dir) -> tuple[str, str]:
    """Write a synthetic corpus; returns (train_manifest_path, val_manifest_path).

    Each video is a word sequence; every modality sees a different fixed
    linear embedding of the same words plus gaussian noise. In parity_split
    mode modality 0 is informative only at even 0-based positions and
    modality 1 only at odd ones, so neither stream suffices alone: blinded
    positions keep just the measurement noise (the word signal is zeroed).
    """
    out_dir = str(out_dir)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    embeddings = synthetic_embeddings(spec)
    _, data_seed = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.default_rng(data_seed)
    words = spec.words()

    tok.save_vocab(tok.make_vocab(list(tok.SPECIAL_TOKENS) + words),
                   os.path.join(out_dir, "vocab.txt"))

    modalities = [Modality(name=f"mod{k}", dim=d)
                  for k, d in enumerate(spec.modality_dims)]
    manifests = {}
    counter = 0
    for split, count in (("train", spec.n_train), ("val", spec.n_val)):
        videos = []
        for _ in range(count):
            vid = f"syn{counter:05d}"
            counter += 1
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            word_ids = rng.integers(0, spec.vocab_words, size=length)
            paths = {}
            for k, emb in enumerate(embeddings):
                signal = emb[word_ids].copy()
                if spec.parity_split:
                    signal[np.arange(length) % 2 != (k % 2)] = 0.0
                mat = signal + spec.noise_std * rng.normal(size=(length, emb.shape[1]))
                rel = os.path.join("features", f"{vid}_mod{k}.wftf")
                write_features(os.path.join(out_dir, rel), mat)
                paths[f"mod{k}"] = rel
            caption = " ".join(words[i] for i in word_ids)
            videos.append(VideoEntry(video_id=vid, feature_paths=paths,
                                     captions=(caption,)))
        manifest = Manifest(modalities=tuple(modalities), videos=tuple(videos),
                            base_dir=out_dir, name="synthetic", split=split)
        mpath = os.path.join(out_dir, f"{split}.json")
        save_manifest(manifest, mpath)
        manifests[split] = mpath
    return manifests["train"], manifests["val"]
