import struct

import numpy as np
import pytest

from cnngp.data_model import ArchConfig, ClassKernel, CovDiag, InputSet, input_cov, input_cov_diag
from cnngp.kernel_file import (
    DigestMismatchError,
    KernelFileError,
    decode,
    encode,
    load_kernel,
    save_kernel,
)
from cnngp.propagation import kernel_matrix, propagate


def payloads(rng):
    X = InputSet(rng.standard_normal((3, 2, 4, 5)))
    yield ClassKernel(rng.standard_normal((4, 3)), "pool")
    yield input_cov(X)
    yield input_cov_diag(X)


def values_of(obj):
    return obj.matrix if isinstance(obj, ClassKernel) else obj.values


class TestRoundTrip:
    def test_bitwise(self, rng, tmp_path):
        for i, obj in enumerate(payloads(rng)):
            p = tmp_path / f"k{i}.nngk"
            save_kernel(p, obj, digest=12345, metadata={"labels": [0, 1, 0]})
            back = load_kernel(p, expected_digest=12345)
            assert type(back.data) is type(obj)
            a, b = values_of(obj), values_of(back.data)
            assert a.shape == b.shape and a.tobytes() == b.tobytes()
            assert back.metadata["labels"] == [0, 1, 0]

    def test_spatial_shape_and_layer_kept(self, rng):
        X = InputSet(rng.standard_normal((2, 1, 6, 6)))
        cfg = ArchConfig(depth=2, padding="valid")
        for track in ("full", "diag"):
            final = propagate(X, cfg, track).final
            back = decode(encode(final)).data
            assert back.spatial_shape == (2, 2) and back.layer == final.layer

    def test_special_values_survive(self):
        m = np.array([[np.nan, np.inf], [-0.0, 5e-324]])
        back = decode(encode(ClassKernel(m))).data.matrix
        assert back.tobytes() == m.tobytes()

    def test_encode_deterministic(self, rng):
        K = kernel_matrix(InputSet(rng.standard_normal((4, 1, 6))), ArchConfig(depth=2))
        meta = {"b": 1, "a": [2, 3]}
        assert encode(K, 7, meta) == encode(K, 7, dict(reversed(list(meta.items()))))

    def test_readout_tag(self):
        f = decode(encode(ClassKernel(np.eye(2), "sub15")))
        assert f.readout == "sub15" and f.kind == "class_kernel"

    def test_tag_too_long(self):
        with pytest.raises(ValueError):
            encode(ClassKernel(np.eye(2), "x" * 17))


class TestHeader:
    def test_layout(self):
        raw = encode(ClassKernel(np.ones((2, 3)), "vec"), digest=0xABCDEF)
        magic, ver, kind, res, rows, cols, d = struct.unpack_from("<4sIIIQQQ", raw)
        assert (magic, ver, kind, res, rows, cols, d) == (b"NNGK", 1, 0, 0, 2, 3, 1)
        assert raw[40:56] == b"vec" + bytes(13)
        digest, mlen = struct.unpack_from("<QQ", raw, 56)
        assert digest == 0xABCDEF
        assert len(raw) == 72 + mlen + 6 * 8

    def test_cov_diag_payload_length(self, rng):
        obj = CovDiag(rng.standard_normal((3, 3, 4)), (4,))
        raw = encode(obj)
        mlen = struct.unpack_from("<Q", raw, 64)[0]
        assert len(raw) - 72 - mlen == 3 * 3 * 4 * 8

    def test_bad_magic(self):
        raw = bytearray(encode(ClassKernel(np.eye(2))))
        raw[:4] = b"XXXX"
        with pytest.raises(KernelFileError):
            decode(bytes(raw))

    def test_truncated(self):
        raw = encode(ClassKernel(np.eye(3)))
        for cut in (10, 71, len(raw) - 1):
            with pytest.raises(KernelFileError):
                decode(raw[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(KernelFileError):
            decode(encode(ClassKernel(np.eye(2))) + bytes(8))

    def test_unknown_version(self):
        raw = bytearray(encode(ClassKernel(np.eye(2))))
        raw[4:8] = struct.pack("<I", 99)
        with pytest.raises(KernelFileError):
            decode(bytes(raw))


class TestDigest:
    def test_mismatch(self):
        raw = encode(ClassKernel(np.eye(2)), digest=1)
        with pytest.raises(DigestMismatchError):
            decode(raw, expected_digest=2)

    def test_force(self):
        f = decode(encode(ClassKernel(np.eye(2)), digest=1), expected_digest=2, force=True)
        assert f.digest == 1

    def test_unchecked(self):
        assert decode(encode(ClassKernel(np.eye(2)), digest=1)).digest == 1

    def test_arch_digest_tracks_config(self):
        a = ArchConfig(depth=2, sigma_w2=1.5)
        assert a.digest() == ArchConfig(depth=2, sigma_w2=1.5).digest()
        assert a.digest() != ArchConfig(depth=3, sigma_w2=1.5).digest()
        assert 0 <= a.digest() < 2**64
