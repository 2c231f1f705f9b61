import numpy as np

from mdsvm.snake import MdsConvBlock


def jitter(module, rng, bias=0.35):
    """Move snake offsets off the integer lattice so finite differences see a smooth function.

    Accepts a single snake conv, an MDSConv block or a network.
    """
    if isinstance(module, MdsConvBlock):
        snakes = module.snakes
    elif hasattr(module, "encoder"):
        snakes = [s for blk in module.encoder for s in blk.snakes]
    else:
        snakes = [module]
    for s in snakes:
        s.predictor.weight.data[:] = 0.003 * rng.standard_normal(s.predictor.weight.shape)
        s.predictor.bias.data[:] = np.arctanh(bias)
