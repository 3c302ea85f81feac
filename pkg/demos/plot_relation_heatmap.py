"""
Relation heat map of a trained tagger
=====================================

A small model is trained on template sentences, then the pairwise relation
scores of one sentence are reduced to a [T, T] map of L2 norms scaled to
[0, 1] and printed as text.
"""

import numpy as np

from grn import TrainConfig, build_vocab, encode_batch, train
from grn.relation import export_heatmap
from grn.synthetic import make_corpus

corpus = make_corpus(20, seed=0)
vocab = build_vocab(corpus, min_freq=1)
config = TrainConfig(epochs=15, seed=0).replace(word_dim=20, context_channels=40)
model = train(config, corpus, vocab).checkpoint.model()

sentence = corpus[3]
batch = encode_batch([sentence], vocab)
h, tokens = export_heatmap(model.relation_map(batch), batch.mask, sentence.tokens)

###############################################################################
# Each row is a token i, each column a partner j.

width = max(len(t) for t in tokens)
print(" " * width, " ".join(f"{t[:5]:>5}" for t in tokens))
for tok, row in zip(tokens, h):
    print(f"{tok:>{width}}", " ".join(f"{v:5.2f}" for v in row))
print("strongest pair:", np.unravel_index(h.argmax(), h.shape))
