import json
import os

import numpy as np
import pytest

from waftm import data as D
from waftm import tokenizer as tok


# ---------------------------------------------------------------------------
# WFTF container


def test_wftf_round_trip_bitwise(tmp_path):
    mat = np.random.default_rng(0).normal(size=(7, 5))
    path = tmp_path / "a.wftf"
    D.write_features(path, mat)
    back = D.read_features(path)
    assert np.array_equal(back, mat)
    assert back.dtype == np.float64


def test_wftf_minimal_single_row(tmp_path):
    path = tmp_path / "one.wftf"
    D.write_features(path, [[1.5, -2.5, 3.5]])
    assert D.read_features(path).shape == (1, 3)


def test_wftf_bad_magic(tmp_path):
    path = tmp_path / "bad.wftf"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(D.DataError, match="magic"):
        D.read_features(path)


def test_wftf_truncated(tmp_path):
    path = tmp_path / "t.wftf"
    D.write_features(path, np.ones((4, 3)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(D.DataError, match="truncated"):
        D.read_features(path)
    path.write_bytes(blob[:10])
    with pytest.raises(D.DataError, match="header"):
        D.read_features(path)


def test_wftf_rejects_nonfinite_and_bad_shape(tmp_path):
    with pytest.raises(D.DataError, match="finite"):
        D.write_features(tmp_path / "x.wftf", [[np.inf, 1.0]])
    with pytest.raises(D.DataError, match="m >= 1"):
        D.write_features(tmp_path / "y.wftf", np.zeros((0, 4)))


def test_subsample_rows():
    mat = np.arange(900.0).reshape(450, 2)
    out = D.subsample_rows(mat)
    assert out.shape[0] <= 200
    assert np.array_equal(out, mat[::3])
    small = np.ones((200, 2))
    assert D.subsample_rows(small) is small


# ---------------------------------------------------------------------------
# manifests


def write_corpus(tmp_path, n_videos=2, dim0=4, dim1=3, caption="a b c"):
    videos = []
    rng = np.random.default_rng(1)
    for i in range(n_videos):
        vid = f"v{i}"
        D.write_features(tmp_path / f"{vid}_a.wftf", rng.normal(size=(3 + i, dim0)))
        D.write_features(tmp_path / f"{vid}_b.wftf", rng.normal(size=(2 + i, dim1)))
        videos.append({"id": vid,
                       "features": {"rgb": f"{vid}_a.wftf", "flow": f"{vid}_b.wftf"},
                       "captions": [caption, caption + " d"]})
    payload = {"modalities": [{"name": "rgb", "dim": dim0}, {"name": "flow", "dim": dim1}],
               "videos": videos}
    path = tmp_path / "m.json"
    path.write_text(json.dumps(payload))
    return path


def test_manifest_minimal_loads(tmp_path):
    path = write_corpus(tmp_path, n_videos=1)
    man = D.load_manifest(path)
    assert man.modality_names() == ["rgb", "flow"]
    assert len(man.videos) == 1
    rec, caps = D.load_video(man, man.videos[0])
    assert rec.features[0].shape == (3, 4)
    assert rec.features[1].shape == (2, 3)
    assert caps.captions == ("a b c", "a b c d")


def test_manifest_missing_file_names_path(tmp_path):
    path = write_corpus(tmp_path)
    os.remove(tmp_path / "v1_b.wftf")
    with pytest.raises(D.DataError, match="v1_b.wftf"):
        D.load_manifest(path)


def test_manifest_dim_mismatch_names_video(tmp_path):
    path = write_corpus(tmp_path)
    raw = json.loads(path.read_text())
    raw["modalities"][0]["dim"] = 64
    path.write_text(json.dumps(raw))
    with pytest.raises(D.DataError, match="'v0'.*dim 64.*dim 4"):
        D.load_manifest(path)


def test_manifest_duplicate_ids(tmp_path):
    path = write_corpus(tmp_path)
    raw = json.loads(path.read_text())
    raw["videos"][1]["id"] = "v0"
    path.write_text(json.dumps(raw))
    with pytest.raises(D.DataError, match="duplicate video id"):
        D.load_manifest(path)


def test_manifest_rejects_unknown_keys_and_empty_captions(tmp_path):
    path = write_corpus(tmp_path)
    raw = json.loads(path.read_text())
    raw["extra"] = 1
    path.write_text(json.dumps(raw))
    with pytest.raises(D.DataError, match="unknown keys"):
        D.load_manifest(path)
    raw.pop("extra")
    raw["videos"][0]["captions"] = ["  "]
    path.write_text(json.dumps(raw))
    with pytest.raises(D.DataError, match="non-empty caption"):
        D.load_manifest(path)


def test_manifest_feature_keys_must_match_modalities(tmp_path):
    path = write_corpus(tmp_path)
    raw = json.loads(path.read_text())
    del raw["videos"][0]["features"]["flow"]
    path.write_text(json.dumps(raw))
    with pytest.raises(D.DataError, match="do not match"):
        D.load_manifest(path)


def test_manifest_save_load_fixed_point(tmp_path):
    man = D.load_manifest(write_corpus(tmp_path))
    out = tmp_path / "resaved.json"
    D.save_manifest(man, out)
    again = D.load_manifest(out)
    assert again.modalities == man.modalities
    assert again.videos == man.videos
    D.save_manifest(again, tmp_path / "thrice.json")
    assert (tmp_path / "thrice.json").read_bytes() == out.read_bytes()


# ---------------------------------------------------------------------------
# batching


def toy_vocab():
    return tok.make_vocab(list(tok.SPECIAL_TOKENS) + ["a", "b", "c", "d"])


def test_batch_single_record_no_padding(tmp_path):
    man = D.load_manifest(write_corpus(tmp_path, n_videos=1))
    pair = D.load_video(man, man.videos[0])
    batch = D.make_batch([pair], toy_vocab(), max_len=8, rng=np.random.default_rng(0))
    assert batch.features[0].shape == (1, 3, 4)
    assert batch.feature_valid[0].all()
    assert batch.token_seqs[0].ids[0] == tok.BOS


def test_batch_padding_is_zero_and_masked(tmp_path):
    man = D.load_manifest(write_corpus(tmp_path, n_videos=2))
    pairs = [D.load_video(man, v) for v in man.videos]
    batch = D.make_batch(pairs, toy_vocab(), max_len=8, rng=np.random.default_rng(0))
    assert batch.features[0].shape == (2, 4, 4)  # v1 has 4 rgb frames
    assert np.all(batch.features[0][0, 3] == 0.0)
    assert not batch.feature_valid[0][0, 3]
    assert batch.feature_valid[0][1].all()
    assert np.all(batch.features[1][0, 2] == 0.0)


def test_batch_reference_sampling_is_seeded(tmp_path):
    man = D.load_manifest(write_corpus(tmp_path, n_videos=2))
    pairs = [D.load_video(man, v) for v in man.videos]
    picks = [D.make_batch(pairs, toy_vocab(), 8, np.random.default_rng(9)).sampled_captions
             for _ in range(2)]
    assert picks[0] == picks[1]
    other = D.make_batch(pairs, toy_vocab(), 8, np.random.default_rng(10)).sampled_captions
    assert isinstance(other, list)


# ---------------------------------------------------------------------------
# synthetic task


def small_spec(**overrides):
    base = dict(seed=5, vocab_words=20, min_len=3, max_len=6,
                modality_dims=(16, 12), noise_std=0.0, n_train=12, n_val=4)
    return D.SyntheticTaskSpec(**{**base, **overrides})


def test_synthetic_generation_is_byte_identical(tmp_path):
    spec = small_spec(noise_std=0.05)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    D.generate_synthetic(spec, d1)
    D.generate_synthetic(spec, d2)
    files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel


def test_synthetic_manifests_load_and_split_sizes(tmp_path):
    train_path, val_path = D.generate_synthetic(small_spec(), tmp_path)
    train, val = D.load_manifest(train_path), D.load_manifest(val_path)
    assert len(train.videos) == 12 and len(val.videos) == 4
    assert train.split == "train" and val.split == "val"
    ids = {v.video_id for v in train.videos} | {v.video_id for v in val.videos}
    assert len(ids) == 16
    vocab = tok.load_vocab(os.path.join(tmp_path, "vocab.txt"))
    assert len(vocab) == 4 + 20


def nn_decode(mat, emb):
    d2 = ((mat[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def test_nn_oracle_recovers_words_exactly_without_noise(tmp_path):
    spec = small_spec(noise_std=0.0)
    train_path, _ = D.generate_synthetic(spec, tmp_path)
    man = D.load_manifest(train_path)
    emb = D.synthetic_embeddings(spec)
    words = spec.words()
    for video in man.videos:
        rec, caps = D.load_video(man, video)
        target = [words.index(w) for w in caps.captions[0].split()]
        for k in range(2):
            assert list(nn_decode(rec.features[k], emb[k])) == target


def test_nn_oracle_under_noise(tmp_path):
    spec = D.SyntheticTaskSpec(seed=7, vocab_words=50, min_len=3, max_len=8,
                               modality_dims=(32, 32), noise_std=0.1,
                               n_train=40, n_val=0)
    train_path, _ = D.generate_synthetic(spec, tmp_path)
    man = D.load_manifest(train_path)
    emb = D.synthetic_embeddings(spec)
    words = spec.words()
    total = correct = 0
    for video in man.videos:
        rec, caps = D.load_video(man, video)
        target = np.array([words.index(w) for w in caps.captions[0].split()])
        got = nn_decode(rec.features[0], emb[0])
        total += len(target)
        correct += int((got == target).sum())
    assert correct / total >= 0.99


def test_parity_split_blinds_each_modality_to_half(tmp_path):
    spec = D.SyntheticTaskSpec(seed=11, vocab_words=30, min_len=4, max_len=8,
                               modality_dims=(24, 24), noise_std=0.05,
                               n_train=40, n_val=0, parity_split=True)
    train_path, _ = D.generate_synthetic(spec, tmp_path)
    man = D.load_manifest(train_path)
    emb = D.synthetic_embeddings(spec)
    words = spec.words()
    hits = np.zeros((2, 2))   # [modality, position parity] -> correct
    counts = np.zeros((2, 2))
    for video in man.videos:
        rec, caps = D.load_video(man, video)
        target = np.array([words.index(w) for w in caps.captions[0].split()])
        parity = np.arange(len(target)) % 2
        for k in range(2):
            got = nn_decode(rec.features[k], emb[k])
            for par in (0, 1):
                sel = parity == par
                hits[k, par] += int((got[sel] == target[sel]).sum())
                counts[k, par] += int(sel.sum())
    acc = hits / counts
    assert acc[0, 0] >= 0.99 and acc[1, 1] >= 0.99   # informative halves
    assert acc[0, 1] <= 0.2 and acc[1, 0] <= 0.2     # blinded halves


def test_parity_split_requires_two_modalities():
    with pytest.raises(D.DataError, match="two modalities"):
        D.SyntheticTaskSpec(seed=0, modality_dims=(8,), parity_split=True)


def test_spec_validation():
    with pytest.raises(D.DataError):
        D.SyntheticTaskSpec(seed=0, vocab_words=1)
    with pytest.raises(D.DataError):
        D.SyntheticTaskSpec(seed=0, min_len=5, max_len=4)
    with pytest.raises(D.DataError):
        D.SyntheticTaskSpec(seed=0, noise_std=-0.1)
