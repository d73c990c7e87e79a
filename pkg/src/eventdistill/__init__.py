"""Structure-aware cross-modal distillation for event cameras, desk scale.

Pipeline: synthesize scenes and events (synth_data), aggregate events into
voxel grids with density masks (event_core), encode student and teacher
tokens (features), optimize the masked L1 + Gram structure objective
(losses, trainer), and score frozen features with a linear probe (probe).
"""

__version__ = "0.1.0"
