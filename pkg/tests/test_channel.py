import numpy as np
import pytest

from csiunfold.channel import (
    AUGMENTED, MEASURED, ChannelScenarioConfig, CorruptFileError, Dataset, DatasetLengthError,
    generate_dataset, generate_sample, load_dataset, sample_rng, save_dataset, steering_sf,
)
from csiunfold.transform import CsiMatrix, Domain, sf_to_ad, truncate_delay

import oracles


def small_cfg(**kw):
    base = dict(n_antennas=8, n_subcarriers=64, truncation=16, delay_spread_max=0.4e-6, rng_seed=3)
    base.update(kw)
    return ChannelScenarioConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelScenarioConfig(n_antennas=0)
    with pytest.raises(ValueError):
        ChannelScenarioConfig(n_paths=(0, 3))
    with pytest.raises(ValueError):
        # 2 us at 20 MHz lands in delay bin 40, past the 32 kept rows
        ChannelScenarioConfig(delay_spread_max=2e-6)
    with pytest.raises(ValueError):
        ChannelScenarioConfig(n_subcarriers=16, truncation=32)


def test_profiles():
    d, p = ChannelScenarioConfig.desk(), ChannelScenarioConfig.paper()
    assert (d.n_antennas, d.n_subcarriers, d.truncation) == (32, 256, 32)
    assert (p.n_antennas, p.n_subcarriers, p.truncation) == (32, 1024, 32)


def test_single_path_energy_concentrates():
    H = steering_sf(64, 8, 20e6, [1.0], [0.0], [0.0])
    ad = oracles.dft_sf_to_ad(H)
    e = np.abs(ad) ** 2
    assert e.max() >= 0.99 * e.sum()


def test_closed_form_matches_generator_structure():
    # one path at a delay on the bin grid and an angle on the DFT grid maps to one bin
    n_f, n_b, bw = 32, 8, 20e6
    tau, phi = 3 / bw, np.arcsin(2 * 2 / n_b)
    ad = sf_to_ad(CsiMatrix(steering_sf(n_f, n_b, bw, [1.0], [tau], [phi]), Domain.SPATIAL_FREQUENCY))
    e = np.abs(ad.data) ** 2
    k, l = np.unravel_index(e.argmax(), e.shape)
    assert k == 3
    assert e.max() >= 0.99 * e.sum()


def test_generate_sample_deterministic():
    cfg = small_cfg()
    a = generate_sample(cfg, sample_rng(5, 0)).data
    b = generate_sample(cfg, sample_rng(5, 0)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_sample(cfg, sample_rng(5, 1)).data)


def test_power_spread_60db():
    cfg = small_cfg(path_loss_spread_db=60.0, n_paths=(2, 4))
    ds = generate_dataset(cfg, 1000)
    p = ds.powers()
    assert p.max() / p.min() >= 1e4


def test_dataset_shapes():
    cfg = small_cfg()
    assert len(generate_dataset(cfg, 0)) == 0
    ds = generate_dataset(cfg, 10)
    assert len(ds) == 10 and ds.samples.shape == (10, 16, 8)
    assert ds[3].domain == Domain.ANGULAR_DELAY_TRUNCATED
    assert np.all(ds.provenance == MEASURED)


def test_truncation_energy_loss_small():
    cfg = ChannelScenarioConfig.desk()
    losses = []
    for i in range(100):
        ad = sf_to_ad(generate_sample(cfg, sample_rng(cfg.rng_seed, i)))
        kept = truncate_delay(ad, cfg.truncation)
        losses.append(1 - kept.norm() ** 2 / ad.norm() ** 2)
    assert np.mean(losses) < 0.05


def test_sparsity_present():
    cfg = ChannelScenarioConfig.desk()
    ds = generate_dataset(cfg, 20)
    for s in ds.samples:
        e = np.sort(np.abs(s.astype(complex).ravel()) ** 2)[::-1]
        k99 = int(np.searchsorted(np.cumsum(e) / e.sum(), 0.99)) + 1
        assert 1 <= k99 < s.size // 2


def test_thread_count_independent():
    cfg = small_cfg()
    a = generate_dataset(cfg, 12, workers=1)
    b = generate_dataset(cfg, 12, workers=3)
    assert np.array_equal(a.samples, b.samples)


def test_offset_gives_disjoint_draws():
    cfg = small_cfg()
    a = generate_dataset(cfg, 6)
    b = generate_dataset(cfg, 3, offset=3)
    assert np.array_equal(a.samples[3:], b.samples)


def test_dataset_rejects_zero_sample():
    s = np.ones((2, 3, 4), complex)
    s[1] = 0
    with pytest.raises(ValueError):
        Dataset(s)


def test_save_load_roundtrip(tmp_path):
    ds = generate_dataset(small_cfg(), 7)
    ds.provenance[4:] = AUGMENTED
    path = tmp_path / "d.csid"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.samples, ds.samples)
    assert np.array_equal(back.provenance, ds.provenance)
    assert back.seed == ds.seed and back.meta == ds.meta
    save_dataset(back, tmp_path / "e.csid")
    assert (tmp_path / "e.csid").read_bytes() == path.read_bytes()


def test_truncated_file(tmp_path):
    path = tmp_path / "d.csid"
    save_dataset(generate_dataset(small_cfg(), 3), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:10])
    with pytest.raises(CorruptFileError):
        load_dataset(path)
    path.write_bytes(raw[:-40])
    with pytest.raises(CorruptFileError):
        load_dataset(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "d.csid"
    save_dataset(generate_dataset(small_cfg(), 2), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError):
        load_dataset(path)


def test_header_dims_wrong_payload(tmp_path):
    ds = Dataset(np.ones((2, 32, 32), complex))
    path = tmp_path / "d.csid"
    save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:24] + raw[24 + 8:])  # drop one complex pair
    with pytest.raises(DatasetLengthError):
        load_dataset(path)
