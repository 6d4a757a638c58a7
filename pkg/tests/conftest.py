import numpy as np
import pytest
from hypothesis import settings

from s4convd.core import ComplexVec, DiagonalSSMParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_params(rng, n, b_scale=1.0, log_dt_range=(np.log(1e-3), np.log(1e-1)), channels=None):
    shape = (n,) if channels is None else (channels, n)
    lead = shape[:-1]
    return DiagonalSSMParams(
        log_a_re=rng.normal(-0.5, 0.5, shape),
        a_im=rng.normal(0.0, 3.0, shape),
        b=ComplexVec(b_scale * rng.normal(size=shape), b_scale * rng.normal(size=shape)),
        c=ComplexVec(rng.normal(size=shape), rng.normal(size=shape)),
        d=rng.normal(size=lead),
        log_dt=rng.uniform(*log_dt_range, size=lead),
    )


def cvec(values):
    return ComplexVec.from_complex(np.atleast_1d(np.asarray(values, dtype=np.complex128)))


def gradcheck_problem(variant, seed):
    """Gradient-check point: H=4, N=3, L=16, B=2, dropout off, unit-scale parameters.

    Parameters are drawn at unit scale (not the training init, whose small
    steps leave some pole gradients near 1e-8, below what a 1e-5 central
    difference resolves in f64).
    """
    from s4convd.model import ModelConfig, ModelParams

    cfg = ModelConfig(input_dim=4, measurement_dim=4, state_dim=3, seq_len=16, dropout_p=0.0,
                      kernel_variant=variant)
    r = np.random.default_rng(seed)
    shapes = cfg.shapes()
    arrays = {k: r.normal(0.0, 0.5, s) for k, s in shapes.items()}
    arrays["log_a_re"] = r.normal(-0.5, 0.5, shapes["log_a_re"])
    arrays["a_im"] = r.normal(0.0, 3.0, shapes["a_im"])
    for k in ("b_re", "b_im", "c_re", "c_im", "d"):
        arrays[k] = r.normal(0.0, 1.0, shapes[k])
    arrays["log_dt"] = r.uniform(np.log(0.05), np.log(0.5), shapes["log_dt"])
    x = r.normal(size=(2, 16, 4))
    y = r.normal(size=(2, 16, 1))
    mask = r.random((2, 16, 1)) > 0.2
    return cfg, ModelParams.from_arrays(arrays), x, y, mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
