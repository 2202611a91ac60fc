import json
import os

import numpy as np
import pytest

from dtvg import numkit, store_io
from dtvg.numkit import Rng
from dtvg.store_io import (
    KIND_PROMPT,
    KIND_TPV,
    MetricsWriter,
    RunManifest,
    TpvfLengthError,
    TpvfMagicError,
    TpvfRecord,
    TpvfTruncatedError,
    TpvfVersionError,
    make_metrics_record,
    parse_tpvf,
    read_metrics,
    read_tpvf,
    serialize_tpvf,
    write_tpvf,
)
from dtvg.tpv import SoftPrompt, TaskPromptVector


def random_record(seed, kind=KIND_TPV, d=3, r=2, task_id="task-a"):
    w = numkit.mat_randn(Rng(seed), d, r, 1.0)
    fp = 0 if kind == KIND_PROMPT else 0xDEADBEEF
    return TpvfRecord(kind, d, r, fp, task_id if kind == KIND_TPV else task_id, w)


class TestRoundTrip:
    def test_fields_survive(self, tmp_path):
        rec = random_record(0)
        path = tmp_path / "a.tpvf"
        write_tpvf(path, rec)
        back = read_tpvf(path)
        assert (back.kind, back.d, back.r, back.init_fingerprint, back.task_id) == (
            rec.kind, rec.d, rec.r, rec.init_fingerprint, rec.task_id,
        )
        # payload equality after 64 -> 32 -> 64
        assert np.array_equal(back.weights, rec.weights.astype("<f4").astype(np.float64))

    def test_float32_widening_is_lossless(self, tmp_path):
        rec = random_record(1)
        path = tmp_path / "b.tpvf"
        write_tpvf(path, rec)
        once = read_tpvf(path)
        write_tpvf(path, once)
        assert np.array_equal(read_tpvf(path).weights, once.weights)

    def test_known_payload_bytes_for_unit_value(self):
        rec = TpvfRecord(KIND_PROMPT, 1, 1, 0, "", np.array([[1.0]]))
        data = serialize_tpvf(rec)
        assert data[-4:] == bytes([0x00, 0x00, 0x80, 0x3F])

    def test_header_layout(self):
        rec = TpvfRecord(KIND_TPV, 2, 3, 0x0102030405060708, "ab", np.zeros((2, 3)))
        data = serialize_tpvf(rec)
        assert data[:4] == b"TPV1"
        assert int.from_bytes(data[4:8], "little") == 1
        assert data[8] == 1
        assert int.from_bytes(data[9:13], "little") == 2
        assert int.from_bytes(data[13:17], "little") == 3
        assert int.from_bytes(data[17:25], "little") == 0x0102030405060708
        assert int.from_bytes(data[25:27], "little") == 2
        assert data[27:29] == b"ab"
        assert len(data) == 29 + 4 * 6

    def test_payload_is_token_major(self):
        w = np.array([[1.0, 3.0], [2.0, 4.0]])  # token 0 = column 0 = (1, 2)
        data = serialize_tpvf(TpvfRecord(KIND_PROMPT, 2, 2, 0, "", w))
        payload = np.frombuffer(data[-16:], dtype="<f4")
        assert list(payload) == [1.0, 2.0, 3.0, 4.0]

    def test_corpus_reserialization_idempotent(self, tmp_path):
        rng = Rng(42)
        for i in range(30):
            d, r = 1 + rng.below(6), 1 + rng.below(5)
            kind = KIND_TPV if rng.below(2) else KIND_PROMPT
            rec = TpvfRecord(
                kind, d, r,
                0 if kind == KIND_PROMPT else rng.next_u64(),
                f"task-{i}", numkit.mat_randn(rng, d, r, 2.0),
            )
            p1 = tmp_path / f"{i}_a.tpvf"
            p2 = tmp_path / f"{i}_b.tpvf"
            write_tpvf(p1, rec)
            write_tpvf(p2, read_tpvf(p1))
            assert p1.read_bytes() == p2.read_bytes()

    def test_soft_prompt_and_tpv_objects(self, tmp_path):
        sp = SoftPrompt(2, 2, np.ones((2, 2)))
        write_tpvf(tmp_path / "p.tpvf", sp, task_id="init")
        rec = read_tpvf(tmp_path / "p.tpvf")
        assert rec.kind == KIND_PROMPT and rec.task_id == "init"
        assert isinstance(rec.to_soft_prompt(), SoftPrompt)
        tv = TaskPromptVector("x", 2, 2, np.ones((2, 2)), 7)
        write_tpvf(tmp_path / "t.tpvf", tv)
        rec = read_tpvf(tmp_path / "t.tpvf")
        assert rec.kind == KIND_TPV and rec.init_fingerprint == 7
        assert isinstance(rec.to_task_prompt_vector(), TaskPromptVector)
        with pytest.raises(store_io.TpvfFormatError):
            rec.to_soft_prompt()


class TestErrors:
    def test_wrong_magic(self):
        with pytest.raises(TpvfMagicError, match="not a TPVF file"):
            parse_tpvf(b"NOPE" + bytes(40))

    def test_bad_version(self):
        data = bytearray(serialize_tpvf(random_record(2)))
        data[4] = 9
        with pytest.raises(TpvfVersionError, match="unsupported version"):
            parse_tpvf(bytes(data))

    def test_truncated_payload(self):
        data = serialize_tpvf(random_record(3))
        with pytest.raises(TpvfTruncatedError, match="truncated payload"):
            parse_tpvf(data[:-3])

    def test_trailing_garbage(self):
        data = serialize_tpvf(random_record(4))
        with pytest.raises(TpvfLengthError, match="length mismatch"):
            parse_tpvf(data + b"xx")

    def test_kind0_with_fingerprint_rejected(self):
        data = bytearray(serialize_tpvf(random_record(5, kind=KIND_PROMPT)))
        data[17] = 1  # nonzero fingerprint on a kind-0 record
        with pytest.raises(store_io.TpvfFormatError):
            parse_tpvf(bytes(data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            read_tpvf(tmp_path / "nope.tpvf")


class TestAtomicity:
    def test_interrupted_replace_leaves_original(self, tmp_path, monkeypatch):
        path = tmp_path / "x.tpvf"
        write_tpvf(path, random_record(6))
        original = path.read_bytes()

        def boom(src, dst):
            raise OSError("simulated crash")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            write_tpvf(path, random_record(7))
        monkeypatch.undo()
        assert path.read_bytes() == original
        assert list(tmp_path.glob("*.tmp")) == []


class TestMetrics:
    def test_writer_reader_round_trip(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rec1 = make_metrics_record(0, "dtvg_dynamic", ["a"], 0.1, 0.2, 0.3, None, 1.0, None)
        rec2 = make_metrics_record(1, "dtvg_dynamic", [], 0.0, 0.0, 0.0, 0.5, 0.9, 0.75)
        with MetricsWriter(path) as w:
            w.write(rec1)
        with MetricsWriter(path) as w:  # append-only across writers
            w.write(rec2)
        back = read_metrics(path)
        assert back == [rec1, rec2]

    def test_schema_validation(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"schema": 1, "step": 0}) + "\n")
        with pytest.raises(ValueError, match="missing keys"):
            read_metrics(path)
        path.write_text(json.dumps(dict(make_metrics_record(
            0, "x", [], 0, 0, None, None, None, None), schema=99)) + "\n")
        with pytest.raises(ValueError, match="unsupported metrics schema"):
            read_metrics(path)


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        m = RunManifest(
            engine_version="0.1.0", command="train-source",
            config={"seed": 3, "d": 32}, seed=3,
            input_fingerprints={"a.tpvf": "ff"}, started_at="t0",
            finished_at="t1", output_hash="h",
        )
        path = tmp_path / "manifest.json"
        m.save(path)
        assert RunManifest.load(path) == m
