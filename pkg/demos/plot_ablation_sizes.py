"""
Parameter counts across ablation variants
=========================================

The fusion layer and the context encoder can each be swapped out. The
closed-form count matches the number of weights actually allocated.
"""

import numpy as np

from grn import ModelConfig, parameter_count
from grn.model import param_shapes

n_words, n_chars, n_labels = 20000, 80, 17

for fusion in ("grn", "dfn", "gattn", "none"):
    for context in ("full", "branch3", "off"):
        config = ModelConfig(fusion=fusion, context=context)
        allocated = sum(int(np.prod(shape)) for shape, _ in param_shapes(config, n_words, n_chars, n_labels).values())
        print(f"{fusion:>6} {context:>8} {parameter_count(config, n_words, n_chars, n_labels):>10} {allocated:>10}")

###############################################################################
# grn and dfn share the same relation weight; they differ only in how the
# scores are fused, so their counts coincide.
