import numpy as np
import pytest

from tcaq import pipeline
from tcaq.calibration import sample_calibration_fp
from tcaq.config import RunConfig
from tcaq.diffusion import BLOCKS, ToyUNet
from tcaq.metrics import fmd
from tcaq.qmodel import InitOptions, initialize
from tcaq.quant import fake_quant_array
from tcaq.reconstruction import (GAMMA, ZETA, ReconConfig, adaround_block, block_data, block_mse, init_v,
                                 partition_blocks, par, reconstruct, rect_sigmoid)

W4 = InitOptions(bits_w=4, bits_a=32, bits_s=32, tcr=False, daq=False)


@pytest.fixture(scope="module")
def small():
    m = ToyUNet(seed=5)
    return m, sample_calibration_fp(m, n_chains=4, inference_steps=5, seed=1)


def _block(m, name):
    return next(b for b in partition_blocks(m) if b.name == name)


# -- structure

def test_partition():
    m = ToyUNet()
    blocks = partition_blocks(m)
    assert [b.name for b in blocks] == list(BLOCKS)
    covered = [l for b in blocks for l in b.layer_ids]
    assert len(covered) == len(set(covered))
    assert set(covered) | {"conv_in", "conv_out"} == set(m.layers)
    assert [b.name for b in partition_blocks(m)] == [b.name for b in blocks]


def test_rectified_sigmoid_init_matches_fraction(rng):
    rest = rng.uniform(0.01, 0.99, 50)
    np.testing.assert_allclose(rect_sigmoid(init_v(rest)), rest, atol=1e-6)
    assert rect_sigmoid(np.array([-50.0]))[0] == 0 and rect_sigmoid(np.array([50.0]))[0] == 1
    assert (ZETA, GAMMA) == (1.1, -0.1)


def test_beta_schedule():
    cfg = ReconConfig()
    assert cfg.beta_at(0, 100) is None and cfg.beta_at(19, 100) is None
    assert cfg.beta_at(20, 100) == 20.0
    assert cfg.beta_at(99, 100) == pytest.approx(2.0 + 18.0 / 80)


def test_config_guards():
    with pytest.raises(ValueError):
        ReconConfig(init_iters=10, par_iters=20)
    assert ReconConfig.paper_scale().init_iters == 20000


# -- adaround

def test_grid_weights_are_a_fixed_point(small):
    m, cs = small
    m = m.copy()
    qm = initialize(m, cs, W4)
    block = _block(m, "down.0")
    for lid in block.layer_ids:
        if lid in qm.plan.weight_qp:
            m.params[lid + ".weight"].data = qm.rtn_weight(lid)
            qm._wcache.clear()
    cfg = ReconConfig(init_iters=100, par_iters=50)
    data = block_data(qm, cs, block, cfg)
    res = adaround_block(block, qm, data, cfg, 100)
    assert res.start_mse == pytest.approx(0.0, abs=1e-12) and res.end_mse == pytest.approx(0.0, abs=1e-12)


def test_random_block_beats_nearest(small):
    m, cs = small
    qm = initialize(m, cs, W4)
    block = _block(m, "down.1")
    cfg = ReconConfig()
    res = adaround_block(block, qm, block_data(qm, cs, block, cfg), cfg, 2000)
    assert res.kept and res.end_mse <= 0.8 * res.rtn_mse


def test_regularizer_only_gives_floor_or_ceil(small):
    m, cs = small
    qm = initialize(m, cs, W4)
    block = _block(m, "down.0")
    cfg = ReconConfig(reg_weight=1e6, init_iters=300, par_iters=100)
    adaround_block(block, qm, block_data(qm, cs, block, cfg), cfg, 300)
    for lid in block.layer_ids:
        if lid not in qm.plan.weight_qp:
            continue
        qp, s, z = qm._grid(lid)
        w = qm.w_tilde(lid) / s
        lo, hi = np.floor(w), np.floor(w) + 1
        codes = qm.weight_codes(lid) - z
        inside = (lo + z >= 0) & (hi + z <= qp.qmax)
        assert np.all(((codes == lo) | (codes == hi))[inside])
        assert set(np.unique(qm.plan.rounding.get(lid, np.zeros(1)))) <= {0.0, 1.0}


def test_finalized_weights_representable(small):
    m, cs = small
    qm = initialize(m, cs, W4)
    reconstruct(qm, cs, ReconConfig(init_iters=60, par_iters=30))
    for lid, qp in qm.plan.weight_qp.items():
        w = qm.qweight(lid)
        np.testing.assert_array_equal(fake_quant_array(w, qp), w)


def test_zero_iterations_is_nearest(small):
    m, cs = small
    qm = initialize(m, cs, W4)
    reconstruct(qm, cs, ReconConfig(init_iters=0, par_iters=0))
    assert qm.plan.rounding == {}


def test_reconstruct_deterministic(small):
    m, cs = small
    runs = []
    for _ in range(2):
        qm = initialize(m, cs, InitOptions(bits_w=4, bits_a=8, bits_s=8))
        reconstruct(qm, cs, ReconConfig(init_iters=40, par_iters=20))
        runs.append(qm.plan.rounding)
    assert runs[0].keys() == runs[1].keys()
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


# -- PAR

def test_par_sources_and_monotone_rounds(small):
    m, cs = small
    cfg = ReconConfig(init_iters=40, par_iters=20, rounds=2)
    qm, logs = par(m, cs, InitOptions(bits_w=4, bits_a=8, bits_s=8), cfg, inference_steps=5)
    assert [lg.source for lg in logs] == ["fp_model", "quant_model(0)", "quant_model(1)"]
    assert [lg.round for lg in logs] == [0, 1, 2]
    for lg in logs:
        assert all(b.end_mse <= b.start_mse for b in lg.blocks)
        assert all(b.iters_run <= (40 if lg.round == 0 else 20) for b in lg.blocks)


def test_par_zero_rounds_equals_reconstruct(small):
    m, cs = small
    opts = InitOptions(bits_w=4, bits_a=8, bits_s=8)
    cfg = ReconConfig(init_iters=40, par_iters=20, rounds=0)
    qa, logs = par(m, cs, opts, cfg, inference_steps=5)
    qb = initialize(m, cs, opts)
    reconstruct(qb, cs, cfg)
    assert len(logs) == 1
    assert all(qa.plan.rounding[k].tobytes() == qb.plan.rounding[k].tobytes() for k in qa.plan.rounding)


def test_pipeline_quantize_matches_par(small):
    m, cs = small
    cfg = RunConfig(init_iters=40, par_iters=20, par_rounds=1, inference_steps=5, calib_chains=4, seed=1)
    qa, _ = pipeline.quantize(m, cs, cfg)
    qb, _ = par(m, cs, pipeline.init_options(cfg), cfg.recon(), inference_steps=5)
    assert all(qa.plan.rounding[k].tobytes() == qb.plan.rounding[k].tobytes() for k in qa.plan.rounding)


def test_block_error_after_reconstruction_on_trained(trained, calib):
    qm = initialize(trained, calib, InitOptions(bits_w=4, bits_a=8, bits_s=8))
    cfg = ReconConfig()
    block = _block(trained, "mid")
    data = block_data(qm, calib, block, cfg)
    rtn = block_mse(qm, block, data, cfg)
    res = adaround_block(block, qm, data, cfg, cfg.init_iters)
    assert res.rtn_mse == pytest.approx(rtn) and res.end_mse <= rtn


def test_reconstructed_w4a8_not_worse_than_nearest(trained, calib, reference):
    cfg = RunConfig(par=False)
    opts = pipeline.init_options(cfg, (4, 8, 8))
    rtn = initialize(trained, calib, opts)
    rec, _ = pipeline.quantize(trained, calib, cfg, opts)
    f_rtn = fmd(rtn.sample(512, 20, seed=1), reference)
    f_rec = fmd(rec.sample(512, 20, seed=1), reference)
    assert f_rec <= f_rtn
