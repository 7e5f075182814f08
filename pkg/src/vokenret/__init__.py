"""vokenret: generative cross-modal retrieval over learned voken identifiers.

Pipeline: embed (or synthesize) paired text/image vectors, learn a
cross-modally aligned residual quantizer that names every image with a short
voken sequence, train an encoder-decoder model to generate the target
sequence from query tokens, sharpen it with a beam-candidate contrastive
loss, and retrieve with trie-constrained beam search.
"""

__version__ = "0.1.0"
