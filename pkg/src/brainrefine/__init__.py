"""Brain-informed refinement of speech backbones.

Modules:

* ``bold_dataset``  BOLD sessions, ROI atlases, stimulus windows, splits.
* ``synth_data``    synthetic stimuli and BOLD generators with known ground truth.
* ``backbone``      speech backbone interface, toy backbone, checkpoints, parameter diffs.
* ``encoding_head`` conv downsampler + standardizer + linear voxel readout.
* ``trainer``       two-stage refinement (readout first, then backbone).
* ``neuro_eval``    ridge encoding scores, context sweep, layer-weight probe, t-tests.
* ``superb_score``  normalized aggregate benchmark score.
"""

__version__ = "0.1.0"
