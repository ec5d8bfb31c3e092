"""Session-scoped fixtures for the end-to-end acceptance suite.

Everything here is expensive (model training, calibration at the benchmark
scale), so it is shared across the acceptance tests and built lazily: unit
test runs that do not touch the acceptance module never pay for it.
"""

from dataclasses import replace

import pytest

from coopquant.calibrate import (
    CalibConfig,
    build_calib_set,
    calibrate,
    dataset_ap,
    naive_maxmin,
)
from coopquant.grids import FeatureGrid, RngStream
from coopquant.model import TrainConfig, encode, fit_fp, sample_observation
from coopquant.scene import gen_scenario

BENCH_ARGS = dict(n_agents=3, n_objects=4, n_frames=10, frame_dt_ms=100.0,
                  roi=(48.0, 48.0, 0.5), fov_radius=20.0)


@pytest.fixture(scope="session")
def bench_train():
    return [gen_scenario(seed=i, **BENCH_ARGS) for i in range(20)]


@pytest.fixture(scope="session")
def bench_eval():
    return [gen_scenario(seed=10_000 + i, **BENCH_ARGS) for i in range(5)]


@pytest.fixture(scope="session")
def fp_model(bench_train):
    return fit_fp(bench_train, TrainConfig(epochs=8, lr=0.02, batch=4, seed=0))


@pytest.fixture(scope="session")
def fp_ap(bench_eval, fp_model):
    return dataset_ap(bench_eval, fp_model)


@pytest.fixture(scope="session")
def calib_cfg():
    return CalibConfig(fraction=0.05, t_grid=20, adaround_iters=100,
                       adaround_lr=0.05, bits_weights=8, bits_acts=8, seed=0)


@pytest.fixture(scope="session")
def calib_samples(bench_train, calib_cfg):
    return build_calib_set(bench_train, calib_cfg, RngStream(0))


@pytest.fixture(scope="session")
def cal_w8(fp_model, calib_samples, calib_cfg):
    return calibrate(fp_model, calib_samples, calib_cfg)


@pytest.fixture(scope="session")
def cal_w4(fp_model, calib_samples, calib_cfg):
    return calibrate(fp_model, calib_samples, replace(calib_cfg, bits_weights=4))


@pytest.fixture(scope="session")
def naive_w4(fp_model, calib_samples, calib_cfg):
    return naive_maxmin(fp_model, calib_samples,
                        replace(calib_cfg, bits_weights=4))


@pytest.fixture(scope="session")
def cal_w4a4(fp_model, calib_samples, calib_cfg):
    return calibrate(fp_model, calib_samples,
                     replace(calib_cfg, bits_weights=4, bits_acts=4))


@pytest.fixture(scope="session")
def naive_w4a4(fp_model, calib_samples, calib_cfg):
    return naive_maxmin(fp_model, calib_samples,
                        replace(calib_cfg, bits_weights=4, bits_acts=4))


@pytest.fixture(scope="session")
def bench_features(bench_train, fp_model):
    """Encoder outputs over the first frames of the training split."""
    feats = []
    for scn in bench_train[:4]:
        for fi in range(0, len(scn.frames), 5):
            for agent in scn.agents:
                obs = FeatureGrid(sample_observation(scn, agent.id, fi))
                feats.append(encode(obs, fp_model, agent.modality_tag))
    return feats
