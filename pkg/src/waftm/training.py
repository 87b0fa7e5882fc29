"""Cross-entropy training, SCST fine-tuning, and checkpointing.

SCST uses the mean of each video's beam rewards as the baseline (not a
separate greedy rollout), so a reward consensus across beams contributes
exactly zero gradient. Checkpoints are a binary container: magic "WFTM",
u32 version, length-prefixed JSON header (model config, optimizer scalars,
training state, vocabulary), then named float64 tensor records covering
both parameters and Adam moments. Round trips are byte-exact.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import metrics as Me
from . import model as Mo
from . import tensor as T
from . import tokenizer as tok
from .decoding import beam_search, greedy_decode, sequence_log_prob

CKPT_MAGIC = b"WFTM"
CKPT_VERSION = 1


class TrainError(RuntimeError):
    """Aborted training step or unusable checkpoint."""


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict[str, T.Tensor], state: AdamState,
              grad_clip: float = 1.0) -> None:
    grads = {}
    for name, p in params.items():
        g = p.grad_or_zeros()
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in {name}; step aborted")
        grads[name] = g.copy()
    clip_global_norm(grads, grad_clip)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# steps


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "xe"
    batch_size: int = 16
    max_epochs: int = 10
    learning_rate: float = 3e-4
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    validate_every: int = 1
    scst_beam_size: int = 3

    def __post_init__(self):
        if self.mode not in ("xe", "scst"):
            raise TrainError(f"mode must be 'xe' or 'scst', got {self.mode!r}")
        if min(self.batch_size, self.max_epochs, self.validate_every,
               self.scst_beam_size) < 1:
            raise TrainError("batch_size, max_epochs, validate_every and "
                             "scst_beam_size must be >= 1")
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise TrainError("learning_rate and grad_clip must be positive")
        if self.checkpoint_every < 0:
            raise TrainError("checkpoint_every must be >= 0")


def xe_step(model: Mo.WaftmModel, batch: D.Batch, opt: AdamState,
            grad_clip: float = 1.0,
            dropout_rng: np.random.Generator | None = None) -> float:
    """One teacher-forced step over a batch; returns the mean token loss."""
    total = None
    n_tokens = 0
    train = dropout_rng is not None
    for i in range(len(batch)):
        seq = batch.token_seqs[i]
        ids = seq.ids[: seq.length]
        logits = Mo.model_forward(model, batch.sample_features(i), ids[:-1],
                                  feature_valid=batch.sample_valid(i),
                                  train=train, rng=dropout_rng)
        ce = T.cross_entropy_logits(logits, np.asarray(ids[1:]))
        count = len(ids) - 1
        n_tokens += count
        piece = ce * float(count)
        total = piece if total is None else total + piece
    loss = total * (1.0 / n_tokens)
    for p in model.params.values():
        p.zero_grad()
    T.backward(loss)
    adam_step(model.params, opt, grad_clip=grad_clip)
    return float(loss.data)


@dataclass
class ScstBatchResult:
    video_ids: list[str]
    sequences: list[list[list[int]]]   # per video, per beam token ids
    rewards: list[np.ndarray]
    baselines: list[float]
    advantages: list[np.ndarray]
    loss: float
    mean_reward: float


def scst_step(model: Mo.WaftmModel, batch: D.Batch, opt: AdamState,
              vocab: tok.Vocabulary, refs: dict[str, list[str]],
              idf: Me.IdfTable, beam_size: int, max_len: int | None = None,
              grad_clip: float = 1.0) -> ScstBatchResult:
    """One self-critical step: beam rollouts, CIDEr-D rewards, mean baseline."""
    all_seqs, all_rewards, baselines, advantages = [], [], [], []
    terms = None
    total_tokens = 0
    for i in range(len(batch)):
        vid = batch.video_ids[i]
        if vid not in idf.video_ids:
            raise TrainError(f"video {vid!r} absent from the idf reference corpus")
        feats = batch.sample_features(i)
        valid = batch.sample_valid(i)
        beams = beam_search(model, feats, beam_size, max_len=max_len,
                            feature_valid=valid)
        r = np.array([
            Me.cider_d_sentence(tok.decode(seq.ids, vocab), refs[vid], idf)
            for seq, _ in beams
        ])
        base = float(r[0]) if r.max() == r.min() else float(r.mean())
        adv = r - base
        all_seqs.append([list(seq.ids) for seq, _ in beams])
        all_rewards.append(r)
        baselines.append(base)
        advantages.append(adv)
        for (seq, _), a in zip(beams, adv):
            total_tokens += seq.length - 1
            if a == 0.0:
                continue
            logp = sequence_log_prob(model, feats, seq.ids, feature_valid=valid)
            piece = logp * (-float(a))
            terms = piece if terms is None else terms + piece

    for p in model.params.values():
        p.zero_grad()
    if terms is not None:
        loss = terms * (1.0 / total_tokens)
        T.backward(loss)
        loss_val = float(loss.data)
    else:
        loss_val = 0.0
    adam_step(model.params, opt, grad_clip=grad_clip)
    mean_reward = float(np.mean(np.concatenate(all_rewards)))
    return ScstBatchResult(video_ids=list(batch.video_ids), sequences=all_seqs,
                           rewards=all_rewards, baselines=baselines,
                           advantages=advantages, loss=loss_val,
                           mean_reward=mean_reward)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    mode: str = "xe"


@dataclass
class Checkpoint:
    model: Mo.WaftmModel
    opt: AdamState | None
    train_state: TrainState
    vocab: tok.Vocabulary | None


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, n: int, path) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise TrainError(f"truncated checkpoint {path}")
    return blob


def _read_tensor(fh, path) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
    name = _read_exact(fh, name_len, path).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, path))
    count = 1
    for d in dims:
        count *= d
    arr = np.frombuffer(_read_exact(fh, 8 * count, path), dtype="<f8")
    return name, arr.reshape(dims).copy()


def save_checkpoint(path, model: Mo.WaftmModel, opt: AdamState | None = None,
                    train_state: TrainState | None = None,
                    vocab: tok.Vocabulary | None = None) -> None:
    state = train_state or TrainState()
    header = {
        "config": asdict(model.config),
        "adam": None if opt is None else {
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
            "eps": opt.eps, "t": opt.t,
        },
        "train_state": asdict(state),
        "vocab": None if vocab is None else list(vocab.tokens),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names) + (2 * len(opt.m) if opt else 0)))
        for name in names:
            _write_tensor(fh, name, model.params[name].data)
        if opt is not None:
            for name in sorted(opt.m):
                _write_tensor(fh, f"adam.m.{name}", opt.m[name])
            for name in sorted(opt.v):
                _write_tensor(fh, f"adam.v.{name}", opt.v[name])


def load_checkpoint(path, expected_config: Mo.ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != CKPT_MAGIC:
            raise TrainError(f"bad checkpoint magic {magic!r} in {path}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CKPT_VERSION:
            raise TrainError(f"unsupported checkpoint version {version} in {path}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
        header = json.loads(_read_exact(fh, hlen, path).decode("utf-8"))
        raw_cfg = dict(header["config"])
        raw_cfg["modality_input_dims"] = tuple(raw_cfg["modality_input_dims"])
        config = Mo.ModelConfig(**raw_cfg)
        if expected_config is not None and config != expected_config:
            raise TrainError(
                f"checkpoint config {config} does not match expected {expected_config}"
            )
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4, path))
        tensors = dict(_read_tensor(fh, path) for _ in range(n_tensors))

    reference = Mo.init_model(config, np.random.default_rng(0))
    params = {}
    for name, ref in reference.params.items():
        if name not in tensors:
            raise TrainError(f"checkpoint {path} missing parameter {name}")
        arr = tensors.pop(name)
        if arr.shape != ref.data.shape:
            raise TrainError(
                f"parameter {name} has shape {arr.shape}, expected {ref.data.shape}"
            )
        params[name] = T.Tensor(arr, requires_grad=True)
    model = Mo.WaftmModel(config=config, params=params)

    opt = None
    if header["adam"] is not None:
        opt = AdamState(**header["adam"])
        for name, arr in tensors.items():
            if name.startswith("adam.m."):
                opt.m[name[len("adam.m."):]] = arr
            elif name.startswith("adam.v."):
                opt.v[name[len("adam.v."):]] = arr
            else:
                raise TrainError(f"unexpected tensor {name!r} in {path}")
    elif tensors:
        raise TrainError(f"unexpected tensors {sorted(tensors)} in {path}")

    state = TrainState(**header["train_state"])
    vocab = None if header["vocab"] is None else tok.make_vocab(header["vocab"])
    return Checkpoint(model=model, opt=opt, train_state=state, vocab=vocab)


# ---------------------------------------------------------------------------
# training loop


def _load_all(manifest: D.Manifest) -> list[tuple[D.FeatureRecord, D.CaptionRecord]]:
    return [D.load_video(manifest, v) for v in manifest.videos]


def validate(model: Mo.WaftmModel, vocab: tok.Vocabulary,
             records, refs: dict[str, list[str]]) -> dict:
    candidates = {}
    for rec, caps in records:
        seq = greedy_decode(model, list(rec.features))
        candidates[caps.video_id] = tok.decode(seq.ids, vocab)
    return Me.score_all(candidates, refs)


def train_loop(model: Mo.WaftmModel, vocab: tok.Vocabulary,
               train_manifest: D.Manifest, cfg: TrainConfig, out_dir,
               val_manifest: D.Manifest | None = None,
               opt: AdamState | None = None,
               state: TrainState | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    opt = opt or AdamState(lr=cfg.learning_rate)
    state = state or TrainState(mode=cfg.mode)
    state.mode = cfg.mode

    records = _load_all(train_manifest)
    refs = D.reference_map(train_manifest)
    val_records = _load_all(val_manifest) if val_manifest is not None else None
    val_refs = D.reference_map(val_manifest) if val_manifest is not None else None
    idf = Me.build_idf(refs) if cfg.mode == "scst" else None
    max_len = model.config.max_seq_len

    epoch_losses, val_history = [], []
    with open(log_path, "a", encoding="utf-8") as log:
        def emit(payload):
            log.write(json.dumps(payload, sort_keys=True) + "\n")

        try:
            for _ in range(cfg.max_epochs):
                order_rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, state.epoch, 0x0D0E]))
                order = order_rng.permutation(len(records))
                losses, rewards = [], []
                for b_start in range(0, len(order), cfg.batch_size):
                    chosen = [records[j] for j in order[b_start: b_start + cfg.batch_size]]
                    batch_idx = b_start // cfg.batch_size
                    sample_rng = np.random.default_rng(
                        np.random.SeedSequence([cfg.seed, state.epoch, batch_idx, 0]))
                    batch = D.make_batch(chosen, vocab, max_len, sample_rng)
                    entry = {"step": state.step, "epoch": state.epoch, "mode": cfg.mode}
                    if cfg.mode == "xe":
                        dropout_rng = np.random.default_rng(
                            np.random.SeedSequence([cfg.seed, state.epoch, batch_idx, 1]))
                        loss = xe_step(model, batch, opt, grad_clip=cfg.grad_clip,
                                       dropout_rng=dropout_rng)
                    else:
                        result = scst_step(model, batch, opt, vocab, refs, idf,
                                           beam_size=cfg.scst_beam_size,
                                           max_len=max_len, grad_clip=cfg.grad_clip)
                        loss = result.loss
                        rewards.append(result.mean_reward)
                        entry["reward"] = result.mean_reward
                    losses.append(loss)
                    entry["loss"] = loss
                    emit(entry)
                    state.step += 1

                state.epoch += 1
                epoch_losses.append(float(np.mean(losses)))
                if val_records is not None and state.epoch % cfg.validate_every == 0:
                    summary = {"step": state.step, "epoch": state.epoch,
                               "mode": cfg.mode, "loss": epoch_losses[-1]}
                    if rewards:
                        summary["reward"] = float(np.mean(rewards))
                    scores = validate(model, vocab, val_records, val_refs)
                    summary["val_metrics"] = {k: v for k, v in scores.items() if k != "M"}
                    val_history.append(summary["val_metrics"])
                    emit(summary)
                if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(os.path.join(out_dir, f"ckpt_ep{state.epoch}.wftm"),
                                    model, opt, state, vocab)
        except KeyboardInterrupt:
            save_checkpoint(os.path.join(out_dir, "interrupted.wftm"),
                            model, opt, state, vocab)
            raise

    final_path = os.path.join(out_dir, "final.wftm")
    save_checkpoint(final_path, model, opt, state, vocab)
    return {
        "final_checkpoint": final_path,
        "log_path": log_path,
        "epoch_losses": epoch_losses,
        "val_history": val_history,
    }
