import numpy as np
import pytest
import torch

from latentmark.payload import (PayloadEmbedding, WatermarkPayload, bits_to_hex,
                                hex_to_bits, project_payload, random_payload)


def test_nibble_packing_msb_first():
    bits = np.array([1, 0, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0])
    assert bits_to_hex(bits).tolist() == [10, 1, 15, 0]


def test_all_zero_payload():
    assert bits_to_hex(np.zeros(16, dtype=int)).tolist() == [0, 0, 0, 0]


def test_hex_to_bits_examples():
    assert hex_to_bits(np.array([15])).tolist() == [1, 1, 1, 1]
    assert hex_to_bits(np.array([10, 1, 15, 0])).tolist() == list(
        map(int, "1010000111110000"))


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        bits_to_hex(np.array([1, 0, 1]))  # not divisible by 4
    with pytest.raises(ValueError):
        bits_to_hex(np.array([0, 2, 0, 0]))
    with pytest.raises(ValueError):
        hex_to_bits(np.array([16]))
    with pytest.raises(ValueError):
        random_payload(10)
    with pytest.raises(ValueError):
        WatermarkPayload.from_hex_str("zz")


def test_roundtrip_random_sample():
    rng = np.random.default_rng(3)
    for _ in range(200):
        bits = rng.integers(0, 2, size=32)
        assert np.array_equal(hex_to_bits(bits_to_hex(bits)), bits)


def test_hex_str_parse_format():
    p = WatermarkPayload.from_hex_str("a1f0")
    assert p.hex_str() == "a1f0"
    assert p.bits.tolist() == list(map(int, "1010000111110000"))


def test_random_payload_deterministic():
    a = random_payload(16, seed=11)
    b = random_payload(16, seed=11)
    assert np.array_equal(a.bits, b.bits)
    assert len(a.hex) == 4


def test_random_payload_bit_mean():
    rng = np.random.default_rng(0)
    draws = np.stack([random_payload(16, rng=rng).bits for _ in range(10_000)])
    assert 0.48 <= draws.mean() <= 0.52


def test_project_payload_row_locality():
    torch.manual_seed(0)
    emb = PayloadEmbedding(16, 32)
    a = project_payload(emb, np.array([3, 7, 1, 0]))
    b = project_payload(emb, np.array([3, 9, 1, 0]))
    diff = (a - b).abs().sum(dim=1)
    assert diff[1] > 0
    assert torch.allclose(diff[[0, 2, 3]], torch.zeros(3))


def test_project_payload_deterministic_and_equivariant():
    torch.manual_seed(0)
    emb = PayloadEmbedding(16, 32)
    h = np.array([4, 2, 9, 12])
    assert torch.equal(project_payload(emb, h), project_payload(emb, h))
    with torch.no_grad():
        emb.positional.zero_()
    perm = [2, 0, 3, 1]
    permuted = project_payload(emb, h[perm])
    assert torch.allclose(permuted, project_payload(emb, h)[perm])


def test_table_rows_distinct_after_init():
    torch.manual_seed(1)
    emb = PayloadEmbedding(16, 64)
    table = emb.table.weight.detach()
    gram = torch.cdist(table, table) + torch.eye(16)
    assert float(gram.min()) > 0
