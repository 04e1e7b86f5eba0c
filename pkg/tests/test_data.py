import json

import numpy as np
import pytest

from stars.data import (DatasetSplit, MotionRecord, SyntheticSpec, generate_synthetic, group_id, load_dataset,
                        load_motion_file, save_motion_file, skeleton_template, split_by_group, window_dataset,
                        write_dataset)
from stars.errors import ParameterError, ParseError, ValidationError
from stars.objectives import multimodal_ground_truth


def small(**kw):
    base = dict(sequences=4, history=4, length=12)
    base.update(kw)
    return SyntheticSpec(**base)


def test_generation_is_deterministic():
    a = generate_synthetic(small(), 3)
    b = generate_synthetic(small(), 3)
    assert [r.id for r in a] == [r.id for r in b]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert all(x.to_json() == y.to_json() for x, y in zip(a, b))
    c = generate_synthetic(small(), 4)
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_noise_free_two_modes_branch_at_history():
    spec = small(mode_count=2, noise_scale=0.0, repeats=2)
    recs = generate_synthetic(spec, 0)
    by_group: dict = {}
    for r in recs:
        by_group.setdefault(group_id(r.id), []).append(r)
    for rs in by_group.values():
        hist = {r.frames[:spec.history].tobytes() for r in rs}
        assert len(hist) == 1
        futs = {}
        for r in rs:
            futs.setdefault(r.mode_label, []).append(r.frames[spec.history:])
        assert len(futs) == 2
        for f in futs.values():
            assert all(np.array_equal(f[0], g) for g in f)
        assert np.linalg.norm(futs[0][0] - futs[1][0]) > 0


def test_clean_matches_noisy_structure():
    spec = small(noise_scale=0.01)
    noisy, clean = generate_synthetic(spec, 1), generate_synthetic(spec, 1, clean=True)
    diffs = np.stack([n.frames - c.frames for n, c in zip(noisy, clean)])
    assert abs(diffs.std() - 0.01) < 0.002


def test_single_mode_neighbours_within_noise_ball():
    sigma = 0.002
    spec = small(mode_count=1, repeats=6, noise_scale=sigma, sequences=1)
    ws = window_dataset(generate_synthetic(spec, 2), spec.history, spec.length - spec.history)
    mm = multimodal_ground_truth(ws.X, ws.Y, eps=0.05)
    ball = 6 * sigma * np.sqrt(2 * 3 * 3 * ws.Y.shape[1])
    for i, nb in enumerate(mm.neighbors):
        assert len(nb) == 6
        assert np.linalg.norm((ws.Y[nb] - ws.Y[i]).reshape(len(nb), -1), axis=1).max() < ball


def test_bad_template_and_spec():
    with pytest.raises(ParameterError):
        skeleton_template("octopus")
    with pytest.raises(ParameterError):
        generate_synthetic(small(skeleton="octopus"), 0)
    with pytest.raises(ParameterError):
        small(history=12).validate()


def test_spec_file(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text("[synthetic]\nmode_count = 3\nnoise_scale = 0.01\nskeleton = stick9\n")
    s = SyntheticSpec.from_file(p)
    assert (s.mode_count, s.noise_scale, s.skeleton) == (3, 0.01, "stick9")
    p.write_text("[synthetic]\nbogus = 1\n")
    with pytest.raises(ParseError, match="bogus"):
        SyntheticSpec.from_file(p)


def _rec(V=3, T=5, seed=0):
    return MotionRecord("r0", 25.0, "chain3", tuple(f"j{i}" for i in range(V)),
                        np.random.default_rng(seed).normal(size=(T, V, 3)) / 3, None)


def test_motion_file_round_trip(tmp_path):
    rec = _rec()
    save_motion_file(rec, tmp_path / "m.json")
    back = load_motion_file(tmp_path / "m.json")
    assert np.array_equal(back.frames, rec.frames)
    assert (back.id, back.fps, back.joint_names) == (rec.id, rec.fps, rec.joint_names)


def test_motion_file_errors(tmp_path):
    rec = _rec()
    p = tmp_path / "m.json"
    save_motion_file(rec, p)
    text = p.read_text()
    p.write_text(text[: len(text) // 2])
    with pytest.raises(ParseError, match="line 1, column"):
        load_motion_file(p)
    doc = json.loads(text)
    doc["format_version"] = 9
    p.write_text(json.dumps(doc))
    with pytest.raises(ParseError, match="format_version"):
        load_motion_file(p)
    p.write_text(text)
    sk = skeleton_template("stick9").skeleton
    with pytest.raises(ValidationError, match="expects 9 joints, file has 3"):
        load_motion_file(p, sk)
    bad = _rec()
    bad.frames[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        save_motion_file(bad, tmp_path / "nan.json")


def test_windowing_counts():
    long = _rec(T=125)
    ws = window_dataset([long], 25, 100)
    assert len(ws) == 1 and ws.record_ids == ["r0"]
    ws = window_dataset([_rec(T=20)], 4, 4, stride=50)
    assert len(ws) == 1
    ws = window_dataset([_rec(T=10)], 4, 4, stride=1)
    assert len(ws) == 3 and ws.starts == [0, 1, 2]
    np.testing.assert_array_equal(ws.X[1], _rec(T=10).frames[1:5])


def test_windows_skip_short_records(caplog):
    a, b = _rec(T=3), _rec(T=10)
    b.id = "r1"
    ws = window_dataset([a, b], 4, 4)
    assert ws.skipped == 1 and set(ws.record_ids) == {"r1"}
    assert "skipped 1" in caplog.text
    with pytest.raises(ParameterError):
        window_dataset([b], 4, 4, stride=0)


def test_windows_never_cross_records():
    recs = [_rec(T=9, seed=s) for s in range(3)]
    for i, r in enumerate(recs):
        r.id = f"r{i}"
    ws = window_dataset(recs, 4, 4)
    for k, (rid, s) in enumerate(zip(ws.record_ids, ws.starts)):
        src = recs[int(rid[1:])].frames
        np.testing.assert_array_equal(np.concatenate([ws.X[k], ws.Y[k]]), src[s:s + 8])


def test_split_by_group_is_disjoint():
    recs = generate_synthetic(small(sequences=8), 0)
    train, test = split_by_group(recs, 0.25)
    assert {group_id(r.id) for r in train}.isdisjoint({group_id(r.id) for r in test})
    assert len({group_id(r.id) for r in test}) == 2
    DatasetSplit(train, test, 4, 8)
    with pytest.raises(ValidationError):
        DatasetSplit(train, train[:1], 4, 8)


def test_dataset_directory_round_trip(tmp_path):
    spec = small()
    recs = generate_synthetic(spec, 5)
    sk = skeleton_template(spec.skeleton).skeleton
    manifest = write_dataset(recs, sk, tmp_path, spec, 5)
    assert sum(manifest["mode_record_counts"].values()) == len(recs)
    assert len(manifest["mode_record_counts"]) == spec.mode_count
    sk2, train, test, man2 = load_dataset(tmp_path)
    assert sk2 == sk and man2["seed"] == 5
    assert len(train) + len(test) == len(recs)
    got = {r.id: r for r in train + test}
    assert all(np.array_equal(got[r.id].frames, r.frames) for r in recs)
    with pytest.raises(ParseError):
        load_dataset(tmp_path / "nope")
