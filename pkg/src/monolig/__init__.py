"""Semi-supervised active learning laboratory on a synthetic two-modality world.

Subpackage map:

- geometry: oriented-box BEV IoU, NMS, greedy cross-set matching
- synthworld: reproducible synthetic scenes with two sensor modalities
- nnet: minimal dense-network engine (forward/backward/Adam)
- detectors: teacher with Gaussian uncertainty head, student (ensembles)
- pseudolabel: teacher pseudo-labels with confidence strategies
- scoring: acquisition scores (combined selection score and baselines)
- evaluation: AP at 40 recall points, data-savings rate
- alloop: the label-select-retrain cycle and experiment runner
- expcli: config-driven command line and file interchange
"""

from monolig.geometry import Box3D, MatchResult, ScoredBox, bev_iou, match_sets, nms

__all__ = [
    "Box3D",
    "ScoredBox",
    "MatchResult",
    "bev_iou",
    "nms",
    "match_sets",
]

__version__ = "0.1.0"
