import json
import struct

import numpy as np
import pytest

from conftest import synthetic_model
from logquant import (
    DegenerateError,
    FormatError,
    IoError,
    QuantizedTensor,
    Tensor,
    TensorArchive,
    decode,
    dequantize_model,
    encode,
    load_archive,
    pack,
    quantization_sse,
    read_model,
    save_archive,
    unpack,
    write_model,
)
from logquant.codec import QuantConfig, ScaleStrategy
from logquant.container import ModelContainer, packed_nbytes, read_container, write_container


def qt_from(signs, exps, bits, scale=1.0):
    return QuantizedTensor.from_parts("t", (len(signs),), scale, bits, [s == "-" for s in signs], exps)


def rebuild(blob: bytes, edit):
    """Apply ``edit`` to the parsed manifest of a container blob and re-serialise."""
    (mlen,) = struct.unpack_from("<I", blob, 7)
    manifest = json.loads(blob[11:11 + mlen])
    prefix = bytearray(blob[:11])
    payload = blob[11 + mlen:]
    manifest, payload = edit(manifest, payload)
    head = json.dumps(manifest).encode()
    struct.pack_into("<I", prefix, 7, len(head))
    return bytes(prefix) + head + payload


class TestPack:
    def test_four_bit_example(self):
        assert pack(qt_from("+-", [0, -7], 4)) == bytes([0xF0])

    def test_one_bit_example(self):
        assert pack(qt_from("++-+---+", [0] * 8, 1)) == bytes([0b01110100])

    def test_three_bit_padding(self):
        qt = QuantizedTensor("t", (5,), 1.0, 3, [7] * 5)
        blob = pack(qt)
        assert len(blob) == 2
        assert blob[1] & 0x80 == 0
        assert blob == bytes([0xFF, 0x7F])

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_round_trip_random(self, bits, rng):
        for _ in range(10):
            n = int(rng.integers(1, 1000))
            codes = rng.integers(0, 1 << bits, n)
            qt = QuantizedTensor("t", (n,), 0.75, bits, codes)
            blob = pack(qt)
            assert len(blob) == packed_nbytes(n, bits)
            assert unpack(blob, (n,), bits, 0.75, "t") == qt

    @pytest.mark.parametrize("bits", range(1, 9))
    def test_round_trip_ten_thousand(self, bits, rng):
        codes = rng.integers(0, 1 << bits, 10_000)
        qt = QuantizedTensor("t", (100, 100), 2.0, bits, codes)
        assert unpack(pack(qt), (100, 100), bits, 2.0, "t") == qt

    def test_bit_layout_matches_manual_oracle(self, rng):
        # independent bit-by-bit packer
        for bits in range(1, 9):
            codes = rng.integers(0, 1 << bits, 37)
            out = bytearray(packed_nbytes(37, bits))
            pos = 0
            for c in codes:
                for b in range(bits):
                    if (int(c) >> b) & 1:
                        out[pos // 8] |= 1 << (pos % 8)
                    pos += 1
            assert pack(QuantizedTensor("t", (37,), 1.0, bits, codes)) == bytes(out)

    def test_short_blob(self):
        with pytest.raises(FormatError):
            unpack(b"\x00", (5,), 3, 1.0)

    def test_padding_bit_set(self):
        with pytest.raises(FormatError):
            unpack(bytes([0xFF, 0xFF]), (5,), 3, 1.0)


class TestModelFile:
    def test_payload_ratio_four_bit(self, million_model, tmp_path):
        rep = write_model(million_model, QuantConfig(bits=4), tmp_path / "m.lqnm")
        assert rep.original_bytes == 4_000_000
        assert rep.compressed_bytes == (4 * 998_000 + 32 * 2_000) // 8
        assert rep.ratio == pytest.approx(32 / 4.056, abs=1e-9)
        assert round(rep.ratio, 2) == 7.89
        assert rep.file_bytes == (tmp_path / "m.lqnm").stat().st_size
        assert rep.file_ratio < rep.ratio

    def test_payload_ratio_one_bit(self, million_model, tmp_path):
        rep = write_model(million_model, QuantConfig(bits=1), tmp_path / "m.lqnm")
        # 249,500 bits per weight tensor round up to whole bytes
        assert rep.compressed_bytes == 4 * 31_188 + 8_000
        assert rep.ratio == pytest.approx(32 / (0.998 + 32 * 0.002), rel=1e-4)
        assert round(rep.ratio, 1) == 30.1

    def test_no_bias_passthrough_is_exactly_eight(self, million_model, tmp_path):
        rep = write_model(million_model, QuantConfig(bits=4, keep_biases=False,
                                                     scale_strategy=ScaleStrategy("max")), tmp_path / "m.lqnm")
        assert rep.ratio == 8.0

    @pytest.mark.parametrize("bits", [1, 2, 3, 4])
    @pytest.mark.parametrize("fraction", [0.0, 0.002, 0.01])
    def test_ratio_formula(self, bits, fraction, tmp_path):
        n_bias = int(round(fraction * 100_000))
        rng = np.random.default_rng(bits)
        tensors = [Tensor.from_array("w", rng.normal(0, 0.07, 100_000 - n_bias))]
        if n_bias:
            tensors.append(Tensor.from_array("b.bias", rng.normal(0, 0.17, n_bias)))
        rep = write_model(TensorArchive(tensors), QuantConfig(bits=bits, scale_strategy=ScaleStrategy("max")),
                          tmp_path / "m.lqnm")
        expected_bytes = bits * (100_000 - n_bias) / 8 + 4 * n_bias
        assert abs(rep.compressed_bytes - expected_bytes) < 1 * len(tensors)
        assert rep.ratio == pytest.approx(32 / (bits * (1 - fraction) + 32 * fraction), rel=1e-4)

    def test_round_trip(self, million_model, tmp_path):
        cfg = QuantConfig(bits=4)
        write_model(million_model, cfg, tmp_path / "m.lqnm")
        quantized, raw, cfg2 = read_model(tmp_path / "m.lqnm")
        assert cfg2.bits == 4 and cfg2.keep_biases
        assert sorted(raw) == [f"layer{i}.bias" for i in range(4)]
        for name, t in raw.items():
            assert t == million_model[name]
        for name, qt in quantized.items():
            expected = encode(million_model[name], qt.scale, 4)
            assert qt == expected

    def test_container_adds_no_error(self, tmp_path, rng):
        archive = synthetic_model(2, 30, 40, 2, 40, seed=5)
        cfg = QuantConfig(bits=3)
        write_model(archive, cfg, tmp_path / "m.lqnm")
        dequantize_model(tmp_path / "m.lqnm", tmp_path / "d.lqta")
        out = load_archive(tmp_path / "d.lqta")
        quantized, _, _ = read_model(tmp_path / "m.lqnm")
        for name, t in archive.items():
            if "bias" in name:
                assert out[name] == t
            else:
                assert out[name] == decode(encode(t, quantized[name].scale, 3))

    def test_dequantize_sse_matches_codec(self, tmp_path):
        archive = synthetic_model(3, 20, 30, 1, 30, seed=2)
        write_model(archive, QuantConfig(bits=4), tmp_path / "m.lqnm")
        dequantize_model(tmp_path / "m.lqnm", tmp_path / "d.lqta")
        out = load_archive(tmp_path / "d.lqta")
        quantized, _, _ = read_model(tmp_path / "m.lqnm")
        total = sum(float(np.sum((out[n].data.astype(float) - archive[n].data.astype(float)) ** 2))
                    for n in archive)
        oracle = sum(quantization_sse(archive[n], quantized[n]) for n in quantized)
        assert total == pytest.approx(oracle, rel=1e-12)

    def test_centers_dequantize_exactly(self, tmp_path):
        vals = np.array([1.0, -0.5, 0.25, -0.125, 2 ** -7, 1.0])
        archive = TensorArchive([Tensor.from_array("w", vals), Tensor.from_array("b.bias", [0.3])])
        write_model(archive, QuantConfig(bits=4, scale_strategy=ScaleStrategy("max")), tmp_path / "m.lqnm")
        dequantize_model(tmp_path / "m.lqnm", tmp_path / "d.lqta")
        assert load_archive(tmp_path / "d.lqta") == archive

    def test_negative_eighth(self, tmp_path):
        qt = QuantizedTensor.from_parts("w", (1,), 1.0, 4, [True], [-3])
        write_container(ModelContainer(QuantConfig(bits=4), {"w": qt}, {}), tmp_path / "m.lqnm")
        dequantize_model(tmp_path / "m.lqnm", tmp_path / "d.lqta")
        assert load_archive(tmp_path / "d.lqta")["w"].data[0] == -0.125

    def test_deterministic_bytes(self, tmp_path):
        archive = synthetic_model(2, 50, 50, 2, 50, seed=9)
        write_model(archive, QuantConfig(bits=3), tmp_path / "a.lqnm")
        write_model(archive, QuantConfig(bits=3), tmp_path / "b.lqnm")
        assert (tmp_path / "a.lqnm").read_bytes() == (tmp_path / "b.lqnm").read_bytes()

    def test_threads_do_not_change_output(self, tmp_path, monkeypatch):
        archive = synthetic_model(6, 20, 20, 2, 20, seed=3)
        monkeypatch.setenv("LQNT_THREADS", "1")
        write_model(archive, QuantConfig(), tmp_path / "a.lqnm")
        monkeypatch.setenv("LQNT_THREADS", "4")
        write_model(archive, QuantConfig(), tmp_path / "b.lqnm")
        assert (tmp_path / "a.lqnm").read_bytes() == (tmp_path / "b.lqnm").read_bytes()

    def test_degenerate_names_tensor(self, tmp_path):
        archive = TensorArchive([Tensor("enc.w", (3,), [0, 0, 0])])
        with pytest.raises(DegenerateError, match="enc.w") as info:
            write_model(archive, QuantConfig(), tmp_path / "m.lqnm")
        assert info.value.tensor_name == "enc.w"

    def test_zero_bias_is_fine_when_kept(self, tmp_path):
        archive = TensorArchive([Tensor("w", (2,), [1, -1]), Tensor("b.bias", (2,), [0, 0])])
        write_model(archive, QuantConfig(), tmp_path / "m.lqnm")

    def test_unwritable(self, tmp_path):
        with pytest.raises(IoError):
            write_model(synthetic_model(1, 2, 2, 1, 2), QuantConfig(), tmp_path / "nope" / "m.lqnm")

    def test_documented_header(self, tmp_path):
        archive = TensorArchive([Tensor("w", (2,), [1.0, -0.5]), Tensor("x.bias", (1,), [0.25])])
        write_model(archive, QuantConfig(bits=4, scale_strategy=ScaleStrategy("max")), tmp_path / "m.lqnm")
        blob = (tmp_path / "m.lqnm").read_bytes()
        assert blob[:4] == b"LQNM" and blob[4] == 1 and blob[5] == 4 and blob[6] == 1
        (mlen,) = struct.unpack_from("<I", blob, 7)
        manifest = json.loads(blob[11:11 + mlen])
        assert manifest == [
            {"name": "w", "shape": [2], "kind": "log", "scale": 1.0, "offset": 0, "nbytes": 1},
            {"name": "x.bias", "shape": [1], "kind": "raw", "offset": 1, "nbytes": 4},
        ]
        # w: (+, q=0) -> 0b0000, (-, q=-1) -> 0b1001
        assert blob[11 + mlen:] == bytes([0x90]) + struct.pack("<f", 0.25)


class TestReadErrors:
    @pytest.fixture
    def blob(self, tmp_path):
        write_model(synthetic_model(2, 4, 4, 1, 4), QuantConfig(bits=3), tmp_path / "m.lqnm")
        return (tmp_path / "m.lqnm").read_bytes()

    def parse(self, blob, tmp_path):
        (tmp_path / "x.lqnm").write_bytes(blob)
        return read_container(tmp_path / "x.lqnm")

    def test_version(self, blob, tmp_path):
        bad = bytearray(blob)
        bad[4] = 99
        with pytest.raises(FormatError, match="version"):
            self.parse(bytes(bad), tmp_path)

    def test_magic(self, blob, tmp_path):
        with pytest.raises(FormatError):
            self.parse(b"XXXX" + blob[4:], tmp_path)

    def test_bits_out_of_range(self, blob, tmp_path):
        bad = bytearray(blob)
        bad[5] = 9
        with pytest.raises(FormatError):
            self.parse(bytes(bad), tmp_path)

    def test_tensor_absent_from_payload(self, blob, tmp_path):
        def add_ghost(manifest, payload):
            end = manifest[-1]["offset"] + manifest[-1]["nbytes"]
            manifest.append({"name": "zz", "shape": [8], "kind": "raw", "offset": end, "nbytes": 32})
            return manifest, payload
        with pytest.raises(FormatError):
            self.parse(rebuild(blob, add_ghost), tmp_path)

    def test_truncated(self, blob, tmp_path):
        with pytest.raises(FormatError):
            self.parse(blob[:-1], tmp_path)

    def test_wrong_nbytes(self, blob, tmp_path):
        def shrink(manifest, payload):
            manifest[0]["nbytes"] -= 1
            return manifest, payload
        with pytest.raises(FormatError):
            self.parse(rebuild(blob, shrink), tmp_path)

    def test_bad_scale(self, blob, tmp_path):
        def zero_scale(manifest, payload):
            next(e for e in manifest if e["kind"] == "log")["scale"] = 0.0
            return manifest, payload
        with pytest.raises(FormatError):
            self.parse(rebuild(blob, zero_scale), tmp_path)

    def test_unsorted(self, blob, tmp_path):
        def swap(manifest, payload):
            manifest[0]["name"], manifest[1]["name"] = manifest[1]["name"], manifest[0]["name"]
            return manifest, payload
        with pytest.raises(FormatError):
            self.parse(rebuild(blob, swap), tmp_path)

    def test_garbage_manifest(self, blob, tmp_path):
        bad = bytearray(blob)
        bad[11] = ord("}")
        with pytest.raises(FormatError):
            self.parse(bytes(bad), tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IoError):
            read_model(tmp_path / "none.lqnm")

    def test_write_read_write_identical(self, blob, tmp_path):
        c = self.parse(blob, tmp_path)
        write_container(c, tmp_path / "again.lqnm")
        assert (tmp_path / "again.lqnm").read_bytes() == blob

    def test_dequantized_archive_round_trips(self, blob, tmp_path):
        (tmp_path / "m.lqnm").write_bytes(blob)
        dequantize_model(tmp_path / "m.lqnm", tmp_path / "d.lqta")
        a = load_archive(tmp_path / "d.lqta")
        save_archive(a, tmp_path / "e.lqta")
        assert (tmp_path / "d.lqta").read_bytes() == (tmp_path / "e.lqta").read_bytes()
