import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hipandas.core import (
    MAGIC,
    DimensionError,
    FormatError,
    HsiCube,
    PanImage,
    fold_mode3,
    mode3_product,
    read_cube,
    read_pan,
    singular_values,
    unfold_mode3,
    write_cube,
)


def test_mode3_product_hand_example():
    V = np.array([0.2, 0.4]).reshape(1, 1, 2)
    U = np.array([[1, 0], [0, 1], [0.5, 0.5]])
    out = mode3_product(V, U)
    assert out.shape == (1, 1, 3)
    np.testing.assert_allclose(out[0, 0], [0.2, 0.4, 0.3], atol=1e-12)


def test_mode3_product_identity_and_constants():
    rng = np.random.default_rng(0)
    V = rng.random((5, 4, 3))
    np.testing.assert_array_equal(mode3_product(V, np.eye(3)), V)

    U = rng.random((7, 3))
    U /= U.sum(axis=1, keepdims=True)
    out = mode3_product(np.full((5, 4, 3), 0.37), U)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_mode3_product_rank_mismatch():
    with pytest.raises(DimensionError):
        mode3_product(np.zeros((2, 2, 3)), np.zeros((5, 2)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_mode3_product_bilinear(seed, a, b):
    rng = np.random.default_rng(seed)
    V1, V2 = rng.random((2, 4, 5, 3))
    U = rng.random((6, 3))
    lhs = mode3_product(a * V1 + b * V2, U)
    rhs = a * mode3_product(V1, U) + b * mode3_product(V2, U)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.integers(1, 5))
def test_mode3_product_rank_bound(seed, r):
    rng = np.random.default_rng(seed)
    out = mode3_product(rng.random((6, 7, r)), rng.random((10, r)))
    lam = singular_values(out)
    assert np.all(lam[r:] <= 1e-5 * lam[0])


def test_unfold_shape_and_rows():
    cube = np.arange(4, dtype=float).reshape(1, 2, 2)
    M = unfold_mode3(cube)
    assert M.shape == (2, 2)
    np.testing.assert_array_equal(M[0], cube[:, :, 0].ravel())
    np.testing.assert_array_equal(M[1], cube[:, :, 1].ravel())


def test_unfold_refold_exact():
    cube = np.random.default_rng(1).random((4, 5, 3)).astype(np.float32)
    back = fold_mode3(unfold_mode3(cube), 4, 5)
    assert back.dtype == cube.dtype
    np.testing.assert_array_equal(back, cube)


def test_unfold_rank_one():
    rng = np.random.default_rng(2)
    img = rng.random((6, 6))
    cube = img[:, :, None] * rng.uniform(0.5, 2, size=5)
    assert np.linalg.matrix_rank(unfold_mode3(cube)) == 1


def test_roundtrip_bitwise(tmp_path):
    cube = np.random.default_rng(3).random((8, 8, 4)).astype(np.float32)
    write_cube(cube, tmp_path / "c.hic")
    back = read_cube(tmp_path / "c.hic")
    assert back.values.shape == (8, 8, 4)
    assert back.values.tobytes() == cube.tobytes()
    assert back.unit_scaled


def test_header_layout(tmp_path):
    cube = np.random.default_rng(4).random((3, 5, 2)).astype(np.float32)
    write_cube(cube, tmp_path / "c.hic")
    raw = (tmp_path / "c.hic").read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    assert header == {"height": 3, "width": 5, "bands": 2, "dtype": "f32", "layout": "bsq", "unit_scaled": True}
    payload = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    # band-sequential: first h*w floats are band 0, row-major
    np.testing.assert_array_equal(payload[:15], cube[:, :, 0].ravel())


def test_truncated_payload(tmp_path):
    write_cube(np.zeros((4, 4, 2), np.float32), tmp_path / "c.hic")
    raw = (tmp_path / "c.hic").read_bytes()
    (tmp_path / "t.hic").write_bytes(raw[:-6])
    with pytest.raises(FormatError, match="expected 128 bytes, got 122") as exc:
        read_cube(tmp_path / "t.hic")
    assert exc.value.offset > 12


def test_bad_magic(tmp_path):
    (tmp_path / "x.hic").write_bytes(b"NOTACUBE" + b"\0" * 20)
    with pytest.raises(FormatError, match="bad magic") as exc:
        read_cube(tmp_path / "x.hic")
    assert exc.value.offset == 0


def test_non_finite_payload(tmp_path):
    write_cube(np.zeros((2, 2, 2), np.float32), tmp_path / "c.hic")
    raw = bytearray((tmp_path / "c.hic").read_bytes())
    raw[-4:] = struct.pack("<f", float("nan"))
    (tmp_path / "n.hic").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="non-finite") as exc:
        read_cube(tmp_path / "n.hic")
    assert exc.value.offset == len(raw) - 4


def test_pan_as_single_band(tmp_path):
    pan = np.random.default_rng(5).random((6, 7)).astype(np.float32)
    write_cube(pan, tmp_path / "p.hic")
    cube = read_cube(tmp_path / "p.hic")
    assert cube.bands == 1
    np.testing.assert_array_equal(read_pan(tmp_path / "p.hic").values, pan)


def test_intermediate_cube_flag(tmp_path):
    vals = np.array([[[-0.2, 1.3]]], dtype=np.float32)
    with pytest.raises(ValueError):
        HsiCube(vals)
    cube = HsiCube(vals, unit_scaled=False)
    write_cube(cube, tmp_path / "i.hic")
    back = read_cube(tmp_path / "i.hic")
    assert not back.unit_scaled
    np.testing.assert_array_equal(back.values, vals)


def test_types_reject_bad_input():
    with pytest.raises(ValueError):
        HsiCube(np.array([[[np.inf]]]))
    with pytest.raises(DimensionError):
        PanImage(np.zeros((2, 2, 3)))
    assert HsiCube(np.zeros((3, 4))).bands == 1
