"""Translation equivariance of correlation and two-step max-pooling.

Shifting the input then applying a layer matches applying the layer then
shifting the output (on the interior the padding never touched). Strided
layers are equivariant to shifts that are multiples of their stride.
"""

import numpy as np

from capgram import equivariant as eq
from capgram.autodiff import Tensor

rng = np.random.default_rng(3)
field = eq.FeatureField(Tensor(rng.normal(size=(2, 12, 12))))

conv = eq.ConvLayer(Tensor(rng.normal(size=(4, 2, 3, 3))), stride=1, activation="relu")
conv_padded = eq.ConvLayer(Tensor(rng.normal(size=(4, 2, 3, 3))), stride=1, padding=1)
strided = eq.ConvLayer(Tensor(rng.normal(size=(4, 2, 3, 3))), stride=2)
pool = eq.MaxPoolLayer(2, 2)

cases = [
    ("conv stride 1, shift (2, 0)", conv, (2, 0)),
    ("conv stride 1, shift (0, 3)", conv, (0, 3)),
    ("padded conv,   shift (1, 1)", conv_padded, (1, 1)),
    ("conv stride 2, shift (2, -2)", strided, (2, -2)),
    ("max-pool s=2,  shift (2, 2)", pool, (2, 2)),
]
print(f"{'case':34s} max abs deviation on interior")
for name, layer, shift in cases:
    dev = eq.check_translation_equivariance(layer, field, shift)
    print(f"{name:34s} {dev:.3e}")
    assert dev < 1e-10

print("\nA shift that is not a stride multiple is rejected:")
try:
    eq.check_translation_equivariance(strided, field, (1, 0))
except ValueError as exc:
    print("  ValueError:", exc)
