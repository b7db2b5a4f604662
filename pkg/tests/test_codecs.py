import csv
import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compcil.codecs import (CodecError, CodecSpec, CompressedSample, PayloadCache, dataset_bpp, decode, encode,
                            plot_rd_curve, pooled_bpp, psnr, rd_curve, verify_external, write_rd_csv)


class TestEncode:
    def test_raw_bit_accounting(self, rng):
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        s = encode(img, CodecSpec.identity())
        assert s.bits == 24576
        assert s.bpp == 24.0
        assert s.pixels == 1024

    def test_raw_round_trip_is_bit_exact(self, rng):
        img = rng.integers(0, 256, (7, 13, 3), dtype=np.uint8)
        np.testing.assert_array_equal(decode(encode(img, CodecSpec.identity()), CodecSpec.identity()), img)

    @pytest.mark.parametrize("method,q", [("jpeg", 12), ("jpeg", 90), ("webp", 5), ("webp", 80)])
    def test_bits_match_payload_length(self, smooth_images, method, q):
        codec = CodecSpec(method, q)
        for img in smooth_images[:5]:
            s = encode(img, codec)
            assert s.bits == 8 * len(s.payload)
            assert decode(s, codec).shape == img.shape

    def test_low_quality_jpeg_is_finite(self, smooth_images):
        codec = CodecSpec("jpeg", 12)
        for img in smooth_images[:10]:
            p = psnr(img, decode(encode(img, codec), codec))
            assert math.isfinite(p) and p > 10

    def test_rejects_non_rgb(self):
        with pytest.raises(CodecError):
            encode(np.zeros((4, 4), np.uint8), CodecSpec("jpeg", 50))
        with pytest.raises(CodecError):
            encode(np.zeros((4, 4, 3), np.float32), CodecSpec("jpeg", 50))

    def test_quality_range(self):
        with pytest.raises(CodecError, match="outside"):
            CodecSpec("jpeg", -1)
        with pytest.raises(CodecError):
            CodecSpec("webp", 101)
        with pytest.raises(CodecError, match="unknown"):
            CodecSpec("jpeg2000", 10)

    def test_corrupt_payload(self):
        codec = CodecSpec("jpeg", 50)
        with pytest.raises(CodecError, match="corrupt"):
            decode(CompressedSample(b"not a jpeg", 8, 8), codec)
        with pytest.raises(CodecError):
            decode(CompressedSample(b"\x00" * 10, 8, 8), CodecSpec.identity())

    def test_keys_are_distinct(self):
        keys = {CodecSpec("jpeg", 10).key, CodecSpec("jpeg", 11).key, CodecSpec("webp", 10).key,
                CodecSpec.identity().key}
        assert len(keys) == 4


class TestRate:
    def test_uncompressed_dataset_is_24(self, rng):
        images = [rng.integers(0, 256, (h, w, 3), dtype=np.uint8) for h, w in [(8, 8), (32, 17), (5, 40)]]
        assert dataset_bpp(images, CodecSpec.identity()) == 24.0

    def test_pooled_counterexample(self):
        assert pooled_bpp([100, 300], [50, 50]) == 4.0
        # unequal sizes: pooled 400/150 differs from the mean of per-image rates (2.5)
        assert pooled_bpp([100, 300], [50, 100]) == pytest.approx(400 / 150, abs=0)
        assert pooled_bpp([100, 300], [50, 100]) != (2 + 3) / 2

    def test_pooled_identity_over_dataset(self, smooth_images):
        imgs = [smooth_images[0], smooth_images[1][:16, :24]]
        codec = CodecSpec("jpeg", 40)
        samples = [encode(im, codec) for im in imgs]
        total_bits = sum(s.bits for s in samples)
        total_px = sum(s.pixels for s in samples)
        assert dataset_bpp(imgs, codec) == total_bits / total_px

    def test_pooled_validates(self):
        with pytest.raises(ValueError):
            pooled_bpp([], [])
        with pytest.raises(ValueError):
            pooled_bpp([1, 2], [3])

    def test_monotone_jpeg_rate(self, smooth_images):
        rates = [dataset_bpp(smooth_images, CodecSpec("jpeg", q)) for q in (10, 30, 50, 70, 90)]
        assert rates == sorted(rates)


class TestPsnr:
    def test_identical_is_inf(self, rng):
        img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        assert psnr(img, img) == math.inf

    def test_matches_direct_formula(self, rng):
        a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-9, 10, a.shape), 0, 255).astype(np.uint8)
        mse = np.mean((a.astype(float) - b) ** 2)
        assert abs(psnr(a, b) - 10 * np.log10(255**2 / mse)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 255))
    def test_constant_offset(self, delta):
        a = np.zeros((4, 4, 3), np.uint8)
        b = np.full((4, 4, 3), delta, np.uint8)
        assert psnr(a, b) == pytest.approx(20 * np.log10(255 / delta), abs=1e-9)


class TestRdCurve:
    def test_single_quality(self, smooth_images):
        pts = rd_curve(smooth_images, "jpeg", [50])
        assert len(pts) == 1 and pts[0].codec == CodecSpec("jpeg", 50)

    def test_sorted_by_rate(self, smooth_images):
        pts = rd_curve(smooth_images, "webp", [90, 10, 50])
        bpps = [p.mean_bpp for p in pts]
        assert bpps == sorted(bpps)

    def test_empty_grid(self, smooth_images):
        with pytest.raises(ValueError):
            rd_curve(smooth_images, "jpeg", [])

    def test_unsupported_quality_names_level(self, smooth_images):
        with pytest.raises(CodecError, match="quality 101"):
            rd_curve(smooth_images, "jpeg", [50, 101])

    def test_csv_and_plot(self, smooth_images, tmp_path):
        pts = rd_curve(smooth_images[:4], "jpeg", [20, 80])
        write_rd_csv(pts, tmp_path / "rd.csv")
        plot_rd_curve(pts, tmp_path / "rd.png", "demo")
        rows = list(csv.DictReader(open(tmp_path / "rd.csv")))
        assert [int(r["quality"]) for r in rows] == [20, 80]
        assert (tmp_path / "rd.png").stat().st_size > 0


class TestCache:
    def test_cache_hit_returns_same_payload(self, smooth_images, tmp_path):
        cache = PayloadCache(tmp_path)
        codec = CodecSpec("jpeg", 33)
        first = cache.encode(smooth_images[0], codec)
        files = list(tmp_path.rglob("*.bin"))
        assert len(files) == 1
        again = cache.encode(smooth_images[0], codec)
        assert again == first == encode(smooth_images[0], codec)


def _write_codec_script(tmp_path, body):
    script = tmp_path / "codec.py"
    script.write_text(textwrap.dedent(body))
    return f"{sys.executable} {script}"


QUANTISING_CODEC = """
    import os, sys
    import numpy as np
    from PIL import Image
    mode, src, dst = sys.argv[1:4]
    step = 101 - int(os.environ["CODEC_QUALITY"])
    if mode == "enc":
        x = np.asarray(Image.open(src).convert("RGB"))
        h, w, _ = x.shape
        q = (x // step).astype(np.uint8)
        open(dst, "wb").write(h.to_bytes(2, "big") + w.to_bytes(2, "big") + bytes([step]) + q.tobytes())
    else:
        b = open(src, "rb").read()
        h, w, s = int.from_bytes(b[:2], "big"), int.from_bytes(b[2:4], "big"), b[4]
        q = np.frombuffer(b[5:], np.uint8).reshape(h, w, 3)
        Image.fromarray((q.astype(int) * s + s // 2).clip(0, 255).astype(np.uint8)).save(dst)
"""


class TestExternal:
    def test_round_trip(self, tmp_path, smooth_images):
        codec = CodecSpec("external", 90, _write_codec_script(tmp_path, QUANTISING_CODEC))
        verify_external(codec)
        s = encode(smooth_images[0], codec)
        assert s.bits == 8 * (5 + 32 * 32 * 3)
        out = decode(s, codec)
        assert out.shape == smooth_images[0].shape
        assert np.abs(out.astype(int) - smooth_images[0]).max() <= 11

    def test_quality_placeholder(self, tmp_path, smooth_images):
        body = QUANTISING_CODEC.replace('sys.argv[1:4]', 'sys.argv[2:5]').replace(
            'int(os.environ["CODEC_QUALITY"])', 'int(sys.argv[1])')
        codec = CodecSpec("external", 1, _write_codec_script(tmp_path, body) + " {quality}")
        out = decode(encode(smooth_images[0], codec), codec)
        assert len(np.unique(out)) <= 3

    def test_failure_surfaces_stderr(self, tmp_path, smooth_images):
        cmd = _write_codec_script(tmp_path, """
            import sys
            sys.stderr.write("model weights missing")
            sys.exit(4)
        """)
        with pytest.raises(CodecError, match="model weights missing"):
            encode(smooth_images[0], CodecSpec("external", 5, cmd))
