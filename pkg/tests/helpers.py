"""Shared test utilities: whole-model gradient checking."""

import numpy as np

from capgram import autodiff as ad
from capgram import losses as ls


def flat_parameters(model):
    return np.concatenate([t.data.ravel() for t in model.parameters()]).astype(np.float64)


def model_loss_fn(model, batch, targets, weights=None):
    """Map a flat parameter vector to the training loss of a model.

    Rebinding the parameters to graph-connected views of the vector makes
    the whole model differentiable with respect to one point, which is what
    ``grad_check`` expects.
    """
    weights = weights or ls.LossWeights(0.6, 0.4)
    shapes = [t.data.shape for t in model.parameters()]
    sizes = [int(np.prod(s)) for s in shapes]
    originals = model.parameters()

    def fn(x):
        parts = []
        off = 0
        for size, shape in zip(sizes, shapes):
            parts.append(ad.reshape(ad.take_segment(x, off, off + size), shape))
            off += size
        model.bind_parameters(parts)
        try:
            out = model.forward(batch)
            margin = ls.margin_loss(out.class_activations, targets)
            if out.traces:
                entropy = ls.entropy_loss(out.traces)
                return ls.combined_loss(margin, entropy, weights)
            return margin
        finally:
            model.bind_parameters(originals)

    return fn
