"""Video container and checkpoint files: round trips, validation, header fuzzing."""

import json
import random
import struct

import numpy as np
import pytest
import torch

from lddm.autoencoder import build_autoencoder
from lddm.checkpoint import build_model, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from lddm.classifier import VideoClassifier
from lddm.denoiser import build_denoiser
from lddm.errors import (
    CorruptPayloadError,
    FormatError,
    GeometryError,
    MalformedHeaderError,
    PayloadGeometryError,
    TruncatedPayloadError,
)
from lddm.video import Geometry, VideoClip, decode_video, encode_video, read_video, write_video

from conftest import random_clip

FUZZ_CASES = 1000
GEOM = Geometry(4, 4, 4, 2, 2)


def _prefix_and_header(blob: bytes) -> tuple[int, dict]:
    hlen = struct.unpack_from("<I", blob, 5)[0]
    return 9 + hlen, json.loads(blob[9:9 + hlen])


def _rebuild(blob: bytes, header: dict) -> bytes:
    end, _ = _prefix_and_header(blob)
    raw = json.dumps(header).encode()
    return blob[:5] + struct.pack("<I", len(raw)) + raw + blob[end:]


class TestVideoContainer:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        clip = VideoClip(rng.uniform(size=(16, 16, 16, 2)).astype(np.float32), fps=12.5)
        write_video(tmp_path / "a.lddv", clip)
        back = read_video(tmp_path / "a.lddv", (16, 16, 16, 2))
        assert back.frames.tobytes() == clip.frames.tobytes()
        assert back.fps == 12.5
        assert encode_video(back) == encode_video(clip)

    def test_layout(self, rng):
        clip = random_clip(rng, (2, 3, 4, 2))
        blob = encode_video(clip)
        assert blob[:4] == b"LDDV" and blob[4] == 1
        end, header = _prefix_and_header(blob)
        assert header == {"frames": 2, "height": 3, "width": 4, "channels": 2, "fps": None, "dtype": "f32le"}
        payload = np.frombuffer(blob[end:], dtype="<f4")
        assert np.array_equal(payload, clip.frames.reshape(-1))

    def test_truncated(self, rng):
        blob = encode_video(random_clip(rng))
        with pytest.raises(TruncatedPayloadError):
            decode_video(blob[:-3])

    def test_declared_geometry_mismatch(self, rng):
        blob = encode_video(random_clip(rng, (8, 16, 16, 2)))
        _, header = _prefix_and_header(blob)
        header["frames"] = 16
        with pytest.raises(PayloadGeometryError) as exc:
            decode_video(_rebuild(blob, header))
        assert isinstance(exc.value, GeometryError)

    def test_expected_geometry(self, rng, tmp_path):
        write_video(tmp_path / "a.lddv", random_clip(rng))
        with pytest.raises(PayloadGeometryError):
            read_video(tmp_path / "a.lddv", (8, 4, 4, 2))

    def test_malformed(self, rng):
        blob = encode_video(random_clip(rng))
        with pytest.raises(MalformedHeaderError):
            decode_video(b"XXXX" + blob[4:])
        with pytest.raises(MalformedHeaderError):
            decode_video(blob[:4] + b"\x02" + blob[5:])
        with pytest.raises(MalformedHeaderError):
            decode_video(blob[:7])
        _, header = _prefix_and_header(blob)
        for bad in ({"dtype": "f64le"}, {"frames": 0}, {"width": 2.5}, {"fps": -1}, {"extra": 1}):
            with pytest.raises(MalformedHeaderError):
                decode_video(_rebuild(blob, {**header, **bad}))

    def test_corrupt_values(self, rng):
        blob = bytearray(encode_video(random_clip(rng)))
        end, _ = _prefix_and_header(bytes(blob))
        blob[end:end + 4] = struct.pack("<f", float("nan"))
        with pytest.raises(CorruptPayloadError):
            decode_video(bytes(blob))
        blob[end:end + 4] = struct.pack("<f", 1.5)
        with pytest.raises(CorruptPayloadError):
            decode_video(bytes(blob))

    def test_clip_invariants(self):
        with pytest.raises(ValueError):
            VideoClip(np.full((1, 2, 2, 1), np.inf, np.float32))
        with pytest.raises(ValueError):
            VideoClip(np.full((1, 2, 2, 1), 1.01, np.float32))
        assert VideoClip.from_array(np.full((1, 2, 2, 1), 1.7)).frames.max() == 1.0


def _models():
    enc, dec = build_autoencoder(GEOM, 0, width=2, stages=1, style_grid=1)
    den = build_denoiser(GEOM.latent_tensor_shape, (2, 4, 4), 5, 0, width=2, time_dim=4)
    return [enc, dec, den, VideoClassifier(2, 2)]


class TestCheckpoint:
    @pytest.mark.parametrize("idx", range(4), ids=["encoder", "decoder", "denoiser", "classifier"])
    def test_round_trip_bit_exact(self, idx, tmp_path):
        model = _models()[idx]
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(idx)))
        save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
        back, extra = load_checkpoint(tmp_path / "m.ckpt", model.kind)
        assert extra == {"note": "x"}
        assert type(back) is type(model)
        for (n, a), (m, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert n == m and a.numpy().tobytes() == b.numpy().tobytes()
        assert encode_checkpoint(back, extra) == (tmp_path / "m.ckpt").read_bytes()

    def test_layout(self):
        model = VideoClassifier(2, 2)
        blob = encode_checkpoint(model)
        assert blob[:4] == b"LDDM" and blob[4] == 1
        end, header = _prefix_and_header(blob)
        assert header["kind"] == "classifier" and header["config"] == {"channels": 2, "width": 2}
        first = header["params"][0]
        w = next(iter(model.state_dict().values()))
        assert first["shape"] == list(w.shape) and first["offset"] == 0
        assert np.array_equal(np.frombuffer(blob[end:end + 4 * first["count"]], "<f4"), w.numpy().reshape(-1))
        assert header["payload_bytes"] == len(blob) - end

    def test_wrong_kind(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", VideoClassifier(2, 2))
        with pytest.raises(MalformedHeaderError):
            load_checkpoint(tmp_path / "m.ckpt", "denoiser")

    def test_truncated_and_trailing(self):
        blob = encode_checkpoint(VideoClassifier(2, 2))
        with pytest.raises(TruncatedPayloadError):
            decode_checkpoint(blob[:-1])
        with pytest.raises(PayloadGeometryError):
            decode_checkpoint(blob + b"\0\0\0\0")

    def test_config_disagrees_with_params(self):
        blob = encode_checkpoint(VideoClassifier(2, 2))
        _, header = _prefix_and_header(blob)
        header["config"]["width"] = 3
        with pytest.raises(PayloadGeometryError):
            build_model(*decode_checkpoint(_rebuild(blob, header)))

    def test_oversized_config_does_not_allocate(self):
        blob = encode_checkpoint(VideoClassifier(2, 2))
        _, header = _prefix_and_header(blob)
        header["config"]["width"] = 10 ** 7
        with pytest.raises(FormatError):
            build_model(*decode_checkpoint(_rebuild(blob, header)))


# ------------------------------------------------------------------ fuzzing


def _random_json_value(r: random.Random):
    return r.choice([None, True, -1, 0, 1, 2 ** 40, 3.5, float("nan"), "", "f32le", "decoder", [], [1, -2], {},
                     {"a": 1}])


def _mutate(blob: bytes, r: random.Random) -> bytes:
    end, header = _prefix_and_header(blob)
    kind = r.randrange(7)
    if kind == 0:  # flip bytes inside the prefix or header
        b = bytearray(blob)
        for _ in range(r.randint(1, 4)):
            b[r.randrange(end)] = r.randrange(256)
        return bytes(b)
    if kind == 1:  # cut somewhere in the header region
        return blob[:r.randrange(end)]
    if kind == 2:  # wrong declared header length
        return blob[:5] + struct.pack("<I", r.randrange(2 ** 32)) + blob[9:]
    if kind == 3:  # replace a top-level value
        key = r.choice(sorted(header))
        header[key] = _random_json_value(r)
        return _rebuild(blob, header)
    if kind == 4:  # drop or add a key
        if header and r.random() < 0.5:
            del header[r.choice(sorted(header))]
        else:
            header[r.choice(["extra", "Frames", "x"])] = _random_json_value(r)
        return _rebuild(blob, header)
    if kind == 5:  # mutate a nested value
        nested = [v for v in header.values() if isinstance(v, (dict, list)) and v]
        if nested:
            target = r.choice(nested)
            if isinstance(target, list):
                item = r.choice(target)
                if isinstance(item, dict) and item:
                    item[r.choice(sorted(item))] = _random_json_value(r)
                else:
                    target[r.randrange(len(target))] = _random_json_value(r)
            else:
                target[r.choice(sorted(target))] = _random_json_value(r)
        else:
            header[r.choice(sorted(header))] = _random_json_value(r)
        return _rebuild(blob, header)
    # splice random bytes into the header text
    pos = r.randrange(9, end)
    return blob[:pos] + bytes(r.randrange(256) for _ in range(r.randint(1, 6))) + blob[pos:]


def run_fuzz(blob: bytes, load, seed: int) -> dict:
    r = random.Random(seed)
    outcomes: dict[str, int] = {}
    for _ in range(FUZZ_CASES):
        mutated = _mutate(blob, r)
        try:
            load(mutated)
            name = "accepted"
        except FormatError as exc:
            name = type(exc).__name__
        outcomes[name] = outcomes.get(name, 0) + 1
    return outcomes


def test_fuzz_video_headers(rng):
    blob = encode_video(random_clip(rng, (3, 4, 4, 2)))
    outcomes = run_fuzz(blob, decode_video, 0)
    assert sum(outcomes.values()) == FUZZ_CASES
    assert outcomes.get("MalformedHeaderError", 0) > FUZZ_CASES // 2


def test_fuzz_checkpoint_headers():
    blob = encode_checkpoint(VideoClassifier(2, 2))
    outcomes = run_fuzz(blob, lambda b: build_model(*decode_checkpoint(b)), 1)
    assert sum(outcomes.values()) == FUZZ_CASES
    assert outcomes.get("MalformedHeaderError", 0) > FUZZ_CASES // 2
