import os

# Pin BLAS pools to one thread before numpy first loads. Results do not
# depend on thread count, but the timing-sensitive acceptance checks need
# the steadier single-threaded clock: pool wake-ups add milliseconds of
# jitter that drown the slopes being measured.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
             "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from regionedit.model import Model, ModelConfig
from regionedit.pipeline import PipelineConfig, TrainConfig, train_pipeline_model
from regionedit.tensor import Tensor

# Small enough to keep the whole suite fast, big enough that every code
# path (multi-window grids, halos, anchors) is exercised.
TOY_MODEL = dict(layers=3, heads=4, head_dim=16, patch=8, window=4, halo=1)


@pytest.fixture(scope="session")
def toy_cfg():
    return ModelConfig(**TOY_MODEL)


@pytest.fixture(scope="session")
def pipe_cfg():
    return PipelineConfig(downsample_factor=4, total_steps=28, skipped=18)


@pytest.fixture(scope="session")
def trained(toy_cfg, pipe_cfg):
    """One real training run shared by the quality-sensitive tests."""
    tcfg = TrainConfig(steps=400, batch_size=4, dataset_size=48,
                       image_size=64, seed=0, lr=2e-3, log_every=10 ** 9)
    model, _, losses = train_pipeline_model(toy_cfg, pipe_cfg, tcfg)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    return model


@pytest.fixture()
def wild_model(toy_cfg):
    """Untrained model with every parameter nudged off its init.

    Zero-initialized parts (modulation, output head, LoRA B) would
    otherwise make sampling a no-op and equivalence checks vacuous.
    """
    model = Model(toy_cfg, seed=0)
    rng = np.random.default_rng(99)
    for p in model.params.values():
        p.data = (p.data + 0.05 * rng.standard_normal(p.data.shape)
                  ).astype(np.float32)
    return model


def gradcheck(fn, shapes, seed=0, eps=1e-3, tol=1e-3, scale=1.0):
    """Central finite differences against the tape, per input.

    fn maps Tensors to a scalar Tensor. Error metric per input: max abs
    deviation over the gradient array divided by the larger of the two
    gradients' max magnitude (floored to dodge 0/0).
    """
    rng = np.random.default_rng(seed)
    datas = [(scale * rng.standard_normal(s)).astype(np.float32)
             for s in shapes]
    tracked = [Tensor(d.copy(), requires_grad=True) for d in datas]
    fn(*tracked).backward()

    def value(args):
        return float(fn(*[Tensor(a) for a in args]).data)

    for which, data in enumerate(datas):
        numeric = np.zeros(data.shape, dtype=np.float64)
        flat = numeric.reshape(-1)
        base = [d.copy() for d in datas]
        for j in range(data.size):
            orig = base[which].reshape(-1)[j]
            base[which].reshape(-1)[j] = orig + eps
            hi = value(base)
            base[which].reshape(-1)[j] = orig - eps
            lo = value(base)
            base[which].reshape(-1)[j] = orig
            flat[j] = (hi - lo) / (2.0 * eps)
        analytic = tracked[which].grad
        assert analytic is not None, f"input {which} got no gradient"
        denom = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-4)
        err = np.max(np.abs(numeric - analytic)) / denom
        assert err <= tol, f"input {which}: relative error {err:.2e}"
