import numpy as np
import pytest

from fqsr import _accel
from fqsr.evalmetrics import bicubic_resize
from fqsr.netgraph import (
    BitConfig,
    ConvParams,
    LayerSpec,
    ModelSpec,
    QuantSite,
    Weights,
    build_model,
    calibrate,
    init_weights,
    run,
)
from fqsr.quantizer import QuantParams
from fqsr.trainer import TrainConfig, backward, total_loss

BACKENDS = ["numpy"] + (["numba"] if _accel.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(previous)


def toy_model(arch="srresnet", bits="8/8/8", blocks=2, channels=8, scale=2, seed=0, calib_hw=8):
    """Small model with intervals calibrated on random images."""
    spec = build_model(arch, scale, bits, blocks, channels)
    weights = init_weights(spec, seed, warmup_l=4)
    rng = np.random.default_rng(seed + 1000)
    calibrate(spec, weights, [rng.random((1, 3, calib_hw, calib_hw)) for _ in range(4)])
    return spec, weights


def smooth_rgb(seed, h=24, w=24):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    chans = [np.sin(rng.uniform(1, 6) * xx + rng.uniform(1, 6) * yy + rng.uniform(0, 6)) for _ in range(3)]
    return np.clip(np.stack(chans, -1) * 110 + 128, 0, 255).astype(np.uint8)


def one_patch(seed=0, hw=16, scale=2):
    """Random HR patch and its bicubic LR."""
    hr = np.random.default_rng(seed).random((1, 3, hw, hw))
    lr = np.clip(bicubic_resize(hr, 1 / scale), 0, 1)
    return lr, hr


def one_conv_model(bits=4):
    layer = LayerSpec(id=0, kind="conv", module="E", src=-1, conv=ConvParams(3, 3, 3, 1, 1, False),
                      weight_q=0, act_q=1)
    sites = (QuantSite(0, 0, "weight", bits, True), QuantSite(1, 0, "input", bits, False))
    return ModelSpec("srresnet", 2, 0, 3, BitConfig(bits, bits, 32), (layer,), sites)


def clip_region_setup(seed=0):
    rng = np.random.default_rng(seed)
    spec = one_conv_model()
    w = rng.choice([-1.0, 1.0], (3, 3, 3, 3)) * rng.uniform(0.35, 0.6, (3, 3, 3, 3))
    weights = Weights({"0.weight": w}, [QuantParams(4, True, 0.3, frozen=True),
                                        QuantParams(4, False, 0.5, frozen=True)])
    x = rng.uniform(0.6, 1.0, (1, 3, 5, 5))
    hr = np.full((1, 3, 5, 5), -5.0)  # keeps the L1 residual sign fixed
    return spec, weights, x, hr


def interval_grads_vs_fd(alpha):
    """(analytic, central-difference) dLoss/dI per quantizer of the clip-region 1-conv model."""
    spec, weights, x, hr = clip_region_setup()
    cfg = TrainConfig(alpha=alpha)
    trace = run(spec, weights, x, "fake_quant", keep=True)
    _, g_q = backward(spec, weights, trace, np.sign(trace.output - hr) / hr.size, cfg)

    def loss(qid, interval):
        ww = weights.copy()
        ww.quant[qid].interval = interval
        tr = run(spec, ww, x, "fake_quant", keep=True)
        sites = [(v, ww.quant[q]) for q, v in tr.sites]
        return total_loss(tr.output, hr, sites, cfg).loss_total

    h = 1e-6
    out = []
    for qid, p in enumerate(weights.quant):
        fd = (loss(qid, p.interval + h) - loss(qid, p.interval - h)) / (2 * h)
        out.append((g_q[qid], fd))
    return out


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def pytest_configure(config):
    config.fqsr_acceptance = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "fqsr_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
