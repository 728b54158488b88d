"""Text-conditioned 4D semantic occupancy generation in plain numpy.

Modules:
    grid        occupancy grids, label standardisation, BEV rendering, OCCG files
    codec       reference codec, tiny VAE, patchify, OCCL files
    text        stub text encoder, token refiner, TXTF files
    tensor      reverse-mode autodiff on numpy arrays
    backbone    spatio-temporal dual-stream transformer, OCCW checkpoints
    flow        flow matching, history anchoring, CFG sampler, cost model
    corpus      synthetic scenarios and the training loop
    metrics     distribution metrics, clip protocol, rubric judge
    cli         the ``occ4d`` command
"""

__version__ = "0.1.0"
