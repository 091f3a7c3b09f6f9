import datetime as dt
import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relatape.errors import CorruptPayload, DuplicateCodec, TypeMismatch, UnknownCodec
from relatape.types import (
    F64_ARRAY,
    INT64,
    Codec,
    CodecRegistry,
    EncodedPayload,
    coerce,
    decode_value,
    default_codecs,
    encode_value,
    key_hash,
    parse_type,
    varchar,
)


@pytest.mark.parametrize("token", ["int64", "float64", "varchar(16)", "datetime", "uuid", "json", "bool", "bytes"])
def test_core_tokens_parse(token):
    spec = parse_type(token)
    assert spec.layer == "core"
    assert str(spec) == token


def test_codec_tokens_parse():
    assert parse_type("<f64_array>").store == "hash"
    spec = parse_type("<f64_array@schema>")
    assert spec.is_codec and spec.store == "schema" and spec.codec_id == "f64_array"


def test_native_tokens_are_accepted_but_marked():
    assert parse_type("bigint").layer == "native"
    assert parse_type("decimal(8,2)").family() == "native:decimal(8,2)"


@pytest.mark.parametrize("token", ["integer64", "varchar(0)", "<F64>", "varchar"])
def test_unknown_tokens_rejected(token):
    with pytest.raises(ValueError):
        parse_type(token)


def test_varchar_length_does_not_change_family():
    assert varchar(4).family() == varchar(400).family() == "varchar"


def test_inline_int():
    assert encode_value(INT64, 42) == 42
    assert decode_value(INT64, 42) == 42


def test_varchar_bound():
    with pytest.raises(TypeMismatch, match="5"):
        coerce(varchar(4), "abcde")
    assert coerce(varchar(4), "abcd") == "abcd"


@pytest.mark.parametrize("value", [True, 1.5, "3", 2**63])
def test_int64_rejects(value):
    with pytest.raises(TypeMismatch):
        coerce(INT64, value)


def test_datetime_normalized_to_utc():
    naive = coerce(parse_type("datetime"), dt.datetime(2024, 1, 1, 12))
    assert naive.tzinfo is not None


def test_f64_payload_is_little_endian_doubles():
    enc = encode_value(parse_type("<f64_array>"), [1.0, 2.0, 3.0], default_codecs())
    assert isinstance(enc, EncodedPayload)
    assert len(enc.payload) == 8 * 3
    assert enc.payload == np.array([1.0, 2.0, 3.0], dtype="<f8").tobytes()
    assert enc.metadata["shape"] == [3] and enc.metadata["dtype"] == "f64"
    back = decode_value(parse_type("<f64_array>"), enc, default_codecs())
    assert back.tolist() == [1.0, 2.0, 3.0]


def test_codec_registration_idempotent_and_conflicting():
    reg = CodecRegistry()
    reg.register(F64_ARRAY)
    reg.register(F64_ARRAY)
    assert reg.resolve("f64_array") is F64_ARRAY
    other = Codec("f64_array", 1, lambda v: (b"", {}), lambda p, m: None)
    with pytest.raises(DuplicateCodec):
        reg.register(other)
    with pytest.raises(UnknownCodec):
        reg.resolve("nope")


def test_key_hash_stable_and_distinct():
    a = key_hash([INT64, varchar(8)], [1, "x"])
    assert a == key_hash([INT64, varchar(8)], [1, "x"])
    assert a != key_hash([INT64, varchar(8)], [2, "x"])
    assert len(a) == 64


@given(arrays(np.float64, st.integers(0, 2000), elements=st.floats(allow_nan=False, width=64)))
def test_f64_round_trip(arr):
    codecs = default_codecs()
    spec = parse_type("<f64_array>")
    back = decode_value(spec, encode_value(spec, arr, codecs), codecs)
    assert np.array_equal(back, arr)


def test_lazy_ref_reads_and_corruption(lab):
    lab.insert("lab.subject", [{"subject_id": "s1", "species": "mouse"}])
    lab.insert("lab.session", [{"subject_id": "s1", "session_id": 1}])
    lab.insert("lab.scan", [{"subject_id": "s1", "session_id": 1, "scan_idx": 0, "duration": 1.0, "raw": [1.0, 2.0, 3.0]}])
    reads = lab.objects.reads
    ref = lab.fetch("lab.scan")[0]["raw"]
    assert ref.shape == (3,) and ref.describe()["size"] == 3
    assert lab.objects.reads == reads
    assert ref.materialize().tolist() == [1.0, 2.0, 3.0]
    assert lab.objects.reads == reads + 1
    ref.materialize()
    assert lab.objects.reads == reads + 1

    path = ref.address.path
    assert path == "hash/" + ref.address.content_hash[:2] + "/" + ref.address.content_hash
    assert ref.address.content_hash == hashlib.sha256(np.array([1.0, 2.0, 3.0]).tobytes()).hexdigest()
    lab.objects.corrupt(path)
    with pytest.raises(CorruptPayload):
        lab.fetch("lab.scan")[0]["raw"].materialize()
