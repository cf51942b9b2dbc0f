"""attnprobe: predict final generation quality from early cross-attention maps.

Library layout:

- ``stackio`` / ``dataset``: attention-stack binary format, trajectory
  records, dataset manifests.
- ``stats``: closed-form dispersion statistics (training-free baseline).
- ``probe``: the learned quality predictor and its trainer.
- ``metrics``: rank-correlation / classification evaluation protocol.
- ``testbed``: synthetic attention generator, toy conditional diffusion
  model, programmatic image scorer.
- ``workflows``: prompt gating, seed selection, preference-pair mining.
- ``costing``: analytical FLOPS/latency ledgers for naive vs guided runs.
- ``cli``: the ``attnprobe`` command-line entry point.
"""

__version__ = "0.1.0"
