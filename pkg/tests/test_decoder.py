"""Linear decoder tests: affinity, synthetic bases, file format, code fitting."""

import numpy as np
import pytest

from cfslam.decoder import (
    DecoderFormatError,
    LinearDecoder,
    build_synthetic_decoder,
    fit_code_to_depth,
    load_decoder,
    save_decoder,
)
from conftest import smooth_random_image

W, H = 64, 48


class TestDecode:
    def test_zero_code_gives_zero_depth(self):
        dec = build_synthetic_decoder(W, H, 8)
        dm = dec.decode(np.zeros(8))
        np.testing.assert_array_equal(dm.depths, dec.zero_depth)
        assert not dm.clamped.any()

    def test_unit_code_adds_basis_slice(self):
        dec = build_synthetic_decoder(W, H, 8)
        for k in (0, 3, 7):
            e = np.zeros(8)
            e[k] = 1.0
            dm = dec.decode(e)
            np.testing.assert_allclose(dm.depths, dec.zero_depth + dec.basis[:, :, k])

    def test_superposition_exact(self, rng):
        dec = build_synthetic_decoder(W, H, 8)
        c1 = rng.normal(size=8) * 0.2
        c2 = rng.normal(size=8) * 0.2
        lhs = dec.decode(c1 + c2).depths - dec.zero_depth
        rhs = (dec.decode(c1).depths - dec.zero_depth) + (
            dec.decode(c2).depths - dec.zero_depth
        )
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_clamp_flags(self):
        dec = build_synthetic_decoder(W, H, 1, d0=2.0, d_min=0.1, d_max=12.0)
        dm = dec.decode(np.array([-1.95]))  # raw depth 0.05 < d_min
        assert dm.clamped.all()
        np.testing.assert_allclose(dm.depths, 0.1)

    def test_dimension_mismatch(self):
        dec = build_synthetic_decoder(W, H, 8)
        with pytest.raises(ValueError):
            dec.decode(np.zeros(9))

    def test_level_decoding_commutes_with_downsampling(self, rng):
        from cfslam.image import downsample2x

        dec = build_synthetic_decoder(W, H, 8)
        code = rng.normal(size=8) * 0.3
        full = dec.decode(code)
        assert not full.clamped.any()
        lvl = dec.at_level(1).decode(code)
        np.testing.assert_allclose(lvl.depths, downsample2x(full.depths), atol=1e-12)


class TestSyntheticBackends:
    def test_k1_degenerate_grid(self):
        dec = build_synthetic_decoder(W, H, 1, d0=2.0)
        np.testing.assert_allclose(dec.basis[:, :, 0], 1.0)
        s = 0.4
        np.testing.assert_allclose(dec.decode(np.array([s])).depths, 2.0 + s)

    def test_k32_grid_partition_of_unity(self):
        dec = build_synthetic_decoder(256, 192, 32, gain=1.0)
        np.testing.assert_allclose(dec.basis.sum(axis=2), 1.0, atol=1e-9)

    def test_k32_compact_support(self):
        # 8x4 control grid: each slice must be zero beyond neighbouring cells
        dec = build_synthetic_decoder(256, 192, 32)
        spacing_u = 255 / 7
        spacing_v = 191 / 3
        slice0 = dec.basis[:, :, 0]  # control point at (0, 0)
        vs, us = np.nonzero(slice0 > 1e-12)
        assert us.max() < spacing_u + 1
        assert vs.max() < spacing_v + 1

    def test_partition_of_unity_various_sizes(self):
        for k in (2, 4, 6, 12, 32):
            dec = build_synthetic_decoder(W, H, k, gain=0.7)
            np.testing.assert_allclose(dec.basis.sum(axis=2) / 0.7, 1.0, atol=1e-9)

    def test_unfactorable_code_size_raises(self):
        with pytest.raises(ValueError):
            build_synthetic_decoder(W, H, 7)

    def test_edge_aware_on_constant_image_matches_smooth(self):
        img = np.full((H, W), 0.5)
        a = build_synthetic_decoder(W, H, 8, kind="smooth")
        b = build_synthetic_decoder(W, H, 8, kind="edge_aware", image=img)
        np.testing.assert_allclose(a.basis, b.basis, atol=1e-12)

    def test_edge_aware_attenuates_at_edges(self, rng):
        img = np.zeros((H, W))
        img[:, W // 2 :] = 1.0
        dec = build_synthetic_decoder(W, H, 8, kind="edge_aware", image=img)
        smooth = build_synthetic_decoder(W, H, 8, kind="smooth")
        edge_col = W // 2
        total_edge = dec.basis[:, edge_col, :].sum()
        total_ref = smooth.basis[:, edge_col, :].sum()
        assert total_edge < 0.01 * total_ref

    def test_zero_depth_floor_enforced(self):
        with pytest.raises(ValueError):
            LinearDecoder(np.full((4, 4), 0.05), np.zeros((4, 4, 1)))


class TestFitCode:
    def test_recovers_known_code(self, rng):
        dec = build_synthetic_decoder(W, H, 8)
        c_star = rng.normal(size=8)
        target = dec.zero_depth + dec.basis @ c_star
        # oracle: SVD least squares on the stacked Tikhonov system
        B = dec.basis.reshape(-1, 8)
        stacked = np.vstack([B, np.sqrt(1e-6) * np.eye(8)])
        rhs = np.concatenate([(target - dec.zero_depth).ravel(), np.zeros(8)])
        oracle = np.linalg.lstsq(stacked, rhs, rcond=None)[0]
        got = dec.fit_code(target)
        np.testing.assert_allclose(got, oracle, atol=1e-9)
        np.testing.assert_allclose(got, c_star, atol=1e-6)

    def test_zero_target_gives_zero_code(self):
        dec = build_synthetic_decoder(W, H, 8)
        np.testing.assert_allclose(dec.fit_code(dec.zero_depth), 0.0, atol=1e-9)

    def test_half_basis_slice(self):
        dec = build_synthetic_decoder(W, H, 8)
        target = dec.zero_depth + 0.5 * dec.basis[:, :, 2]
        B = dec.basis.reshape(-1, 8)
        oracle = np.linalg.lstsq(
            B, (target - dec.zero_depth).ravel(), rcond=None
        )[0]
        got = fit_code_to_depth(dec, target)
        np.testing.assert_allclose(got, oracle, atol=1e-5)
        assert got[2] == pytest.approx(0.5, abs=1e-4)

    def test_fit_decode_round_trip_bounded_codes(self, rng):
        # codes up to the norm-10 envelope; recovery requires that clamping
        # leaves each basis slice observable, so heavily saturated draws
        # (information destroyed, not a solver property) are skipped
        dec = build_synthetic_decoder(W, H, 8)
        B = dec.basis.reshape(-1, 8)
        support = (B * B).sum(axis=0)
        checked = 0
        attempts = 0
        while checked < 20 and attempts < 200:
            attempts += 1
            c = rng.normal(size=8)
            c *= rng.uniform(5.0, 10.0) / max(np.linalg.norm(c), 1e-12)
            dm = dec.decode(c)
            kept = (B[~dm.clamped.ravel()] ** 2).sum(axis=0)
            if np.any(kept < 0.5 * support):
                continue
            np.testing.assert_allclose(dec.fit_code(dm), c, atol=1e-6)
            checked += 1
        assert checked == 20


class TestFileFormat:
    def test_round_trip(self, tmp_path, rng):
        dec = build_synthetic_decoder(W, H, 8, kind="edge_aware",
                                      image=smooth_random_image(rng, H, W))
        path = tmp_path / "d.cfdc"
        save_decoder(dec, path)
        loaded = load_decoder(path)
        # the loaded decoder is f32-quantised; from then on it is bit-exact
        path2 = tmp_path / "d2.cfdc"
        save_decoder(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()
        again = load_decoder(path2)
        np.testing.assert_array_equal(again.zero_depth, loaded.zero_depth)
        np.testing.assert_array_equal(again.basis, loaded.basis)
        assert again.d_min == loaded.d_min and again.d_max == loaded.d_max

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.cfdc"
        dec = build_synthetic_decoder(8, 8, 2)
        save_decoder(dec, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(DecoderFormatError, match="magic"):
            load_decoder(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.cfdc"
        save_decoder(build_synthetic_decoder(8, 8, 2), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(DecoderFormatError, match="truncated"):
            load_decoder(path)

    def test_oversized_header_rejected_before_allocation(self, tmp_path):
        import struct

        path = tmp_path / "huge.cfdc"
        header = struct.pack("<4sIIIIff4x", b"CFDC", 1, 2**20, 2**20, 64, 0.1, 12.0)
        path.write_bytes(header)
        with pytest.raises(DecoderFormatError, match="exceeds"):
            load_decoder(path)

    def test_bad_version(self, tmp_path):
        import struct

        path = tmp_path / "v9.cfdc"
        path.write_bytes(struct.pack("<4sIIIIff4x", b"CFDC", 9, 4, 4, 1, 0.1, 12.0))
        with pytest.raises(DecoderFormatError, match="version"):
            load_decoder(path)
