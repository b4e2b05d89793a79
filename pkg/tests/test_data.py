import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stmamba.autodiff.serialization import FormatError
from stmamba.data import (ClipSpec, dumps_video, export_pngs, gen_dataset, load_dataset, loads_video, psnr,
                          random_clip_spec, render_clip, to_uint8)
from stmamba.flow import load_flow, synthetic_flow


def _digest(d):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def test_same_seed_gives_byte_identical_files(tmp_path):
    gen_dataset(tmp_path / "a", 3, seed=5)
    gen_dataset(tmp_path / "b", 3, seed=5)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    gen_dataset(tmp_path / "c", 3, seed=6)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_flow_files_match_analytic_field_exactly(tmp_path):
    entries = gen_dataset(tmp_path, 4, seed=1)
    for e in entries:
        stored = load_flow(tmp_path / f"{e['name']}.msfl")
        expect = synthetic_flow(e["motion"], e["params"], (e["frames"] - 1, e["size"], e["size"]))
        np.testing.assert_array_equal(stored, expect.astype(np.float32))


def test_load_dataset_shapes_and_manifest(tmp_path):
    gen_dataset(tmp_path, 3, seed=2, frames=5, size=16)
    videos, flows, entries = load_dataset(tmp_path)
    assert videos.shape == (3, 5, 3, 16, 16)
    assert flows.shape == (3, 4, 2, 16, 16)
    assert [e["name"] for e in entries] == ["clip_0000", "clip_0001", "clip_0002"]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 2


def test_translation_frame_is_shifted_previous_frame():
    spec = ClipSpec(motion="translation", params={"velocity": [2.0, 1.0]}, seed=3, frames=3, size=32)
    video, _ = render_clip(spec)
    # integer shift: interior of frame k+1 equals frame k moved by (u, v)
    np.testing.assert_allclose(video[1][:, 1:, 2:], video[0][:, :-1, :-2], atol=1e-6)


def test_clip_spec_ranges():
    for i in range(30):
        spec = random_clip_spec(np.random.default_rng(i), i)
        if spec.motion == "translation":
            assert 0.5 <= np.hypot(*spec.params["velocity"]) <= 1.5
        elif spec.motion == "rotation":
            assert 0.03 <= abs(spec.params["omega"]) <= 0.08
        else:
            assert 0.02 <= abs(spec.params["rate"]) <= 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 31))
def test_video_roundtrip_is_exact_on_uint8_grid(f, h, w, seed):
    rng = np.random.default_rng(seed)
    u8 = rng.integers(0, 256, size=(f, 3, h, w)).astype(np.float32) / 255.0
    back = loads_video(dumps_video(u8))
    np.testing.assert_array_equal(to_uint8(back), to_uint8(u8))


def test_video_header_layout():
    raw = dumps_video(np.zeros((2, 3, 4, 5)))
    assert raw[:4] == b"MSVD"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [1, 2, 4, 5, 3]
    assert len(raw) == 24 + 2 * 4 * 5 * 3


def test_video_errors():
    raw = dumps_video(np.zeros((1, 3, 2, 2)))
    with pytest.raises(FormatError):
        loads_video(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        loads_video(raw[:-1])


def test_png_export(tmp_path):
    from PIL import Image
    video, _ = render_clip(random_clip_spec(np.random.default_rng(0), 0, frames=3, size=16))
    paths = export_pngs(video, tmp_path, "clip")
    assert [p.name for p in paths] == ["clip_000.png", "clip_001.png", "clip_002.png"]
    img = np.asarray(Image.open(paths[1]))
    np.testing.assert_array_equal(img, to_uint8(video)[1].transpose(1, 2, 0))


def test_psnr_basics():
    a = np.zeros((4, 4))
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    mask = np.zeros((4, 4), bool)
    mask[0, 0] = True
    b = a.copy()
    b[1, 1] = 1.0
    assert psnr(a, b, mask) == float("inf")
