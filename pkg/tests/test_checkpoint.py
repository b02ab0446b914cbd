import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smile_fusion.checkpoint import (
    LayerSpec,
    ModelSpec,
    NonFiniteTensorError,
    Tensor,
    TensorStore,
    deserialize,
    read_store,
    serialize,
    write_store,
)
from smile_fusion.errors import (
    MalformedHeaderError,
    OverlappingOffsetsError,
    ShapeError,
    StoreError,
    TruncatedStoreError,
    UnknownDtypeError,
)


def _raw(header: dict, data: bytes = b"") -> bytes:
    h = json.dumps(header).encode()
    return struct.pack("<Q", len(h)) + h + data


def test_empty_store():
    blob = serialize(TensorStore({}))
    (n,) = struct.unpack("<Q", blob[:8])
    assert blob[8:8 + n].strip() == b"{}"
    assert len(blob) == 8 + n
    assert len(deserialize(blob)) == 0


def test_two_by_two_f32_data_size():
    blob = serialize(TensorStore.from_arrays({"w": np.eye(2)}, "F32"))
    (n,) = struct.unpack("<Q", blob[:8])
    assert len(blob) - 8 - n == 16
    assert n % 8 == 0


def test_f64_bit_patterns(rng, tmp_path):
    a = rng.standard_normal((3, 5))
    write_store(TensorStore.from_arrays({"x": a}, "F64"), tmp_path / "s.safetensors")
    back = read_store(tmp_path / "s.safetensors").array("x")
    assert back.tobytes() == a.tobytes()


def test_header_layout_is_sorted(rng):
    store = TensorStore.from_arrays({"b": np.ones(2), "a": np.zeros((1, 3))}, "F32")
    blob = serialize(store)
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + n])
    assert list(header) == ["a", "b"]
    assert header["a"] == {"data_offsets": [0, 12], "dtype": "F32", "shape": [1, 3]}
    assert header["b"]["data_offsets"] == [12, 20]


def test_metadata_entry_ignored():
    blob = _raw({"__metadata__": {"format": "pt"}, "x": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}},
                np.float32(2.0).tobytes())
    store = deserialize(blob)
    assert store.names() == ["x"] and store.array("x")[0] == 2.0


def test_corrupt_inputs():
    with pytest.raises(TruncatedStoreError):
        deserialize(b"\x01\x00")
    with pytest.raises(TruncatedStoreError):
        deserialize(struct.pack("<Q", 100) + b"{}")
    with pytest.raises(MalformedHeaderError):
        deserialize(struct.pack("<Q", 3) + b"{x}")
    with pytest.raises(MalformedHeaderError):
        deserialize(_raw([1, 2]))
    with pytest.raises(UnknownDtypeError):
        deserialize(_raw({"x": {"dtype": "BF16", "shape": [1], "data_offsets": [0, 2]}}, b"\0\0"))
    with pytest.raises(TruncatedStoreError):
        deserialize(_raw({"x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}, b"\0" * 4))
    with pytest.raises(OverlappingOffsetsError):
        deserialize(_raw({
            "x": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "y": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        }, b"\0" * 12))
    with pytest.raises(MalformedHeaderError):
        deserialize(_raw({"x": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8))
    with pytest.raises(MalformedHeaderError):
        deserialize(_raw({"x": {"dtype": "F32"}}))


def test_error_codes_distinct():
    codes = {c.code for c in (TruncatedStoreError, OverlappingOffsetsError, UnknownDtypeError,
                              MalformedHeaderError, NonFiniteTensorError)}
    assert len(codes) == 5
    assert all(issubclass(c, StoreError) for c in (TruncatedStoreError, NonFiniteTensorError))


def test_non_finite_refused(tmp_path):
    store = TensorStore.from_arrays({"x": [1.0, np.inf]}, "F64")
    with pytest.raises(NonFiniteTensorError):
        write_store(store, tmp_path / "x.safetensors")
    assert not list(tmp_path.iterdir())


def test_tensor_validation():
    with pytest.raises(ShapeError):
        Tensor("F32", (2,), b"\0" * 4)
    with pytest.raises(UnknownDtypeError):
        Tensor.from_array([1.0], "I8")


def test_missing_file(tmp_path):
    with pytest.raises(StoreError):
        read_store(tmp_path / "missing.safetensors")


def test_model_spec_chain_and_json(tmp_path):
    spec = ModelSpec.mlp([8, 6, 3])
    assert [l.name for l in spec.layers] == ["fc1", "act1", "fc2"]
    assert spec.input_dim == 8 and spec.output_dim == 3
    spec.save(tmp_path / "m.json")
    assert ModelSpec.load(tmp_path / "m.json") == spec
    with pytest.raises(ShapeError):
        ModelSpec((LayerSpec("a", "linear", 4, 3), LayerSpec("b", "linear", 2, 1)))
    with pytest.raises(ShapeError):
        ModelSpec((LayerSpec("a", "conv", 4, 3),))
    with pytest.raises(MalformedHeaderError):
        ModelSpec.from_json({"layers": [{"name": "x"}]})


names = st.text(alphabet="abcdefghij._0123456789", min_size=1, max_size=12)
shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)


@given(st.dictionaries(names, st.tuples(shapes, st.sampled_from(["F32", "F64"]), st.integers(0, 2**32 - 1)),
                       max_size=6))
def test_write_read_write_byte_identical(entries):
    arrays = {}
    for name, (shape, dtype, seed) in entries.items():
        arrays[name] = Tensor.from_array(np.random.default_rng(seed).standard_normal(shape), dtype)
    store = TensorStore(arrays)
    first = serialize(store)
    again = deserialize(first)
    assert serialize(again) == first
    for name in store.names():
        assert again.entries[name] == store.entries[name]
