"""Cross-modal knowledge distillation from an ECG teacher to a PPG student
for individual identification.

Modules:
    signals      records, windowing, splits, synthetic data, file loading
    backbones    1-D ResNet34 / MobileNetV1 / ShuffleNetV1 and checkpoints
    losses       InfoNCE, MMD, triplet, KD, cross-knowledge assessment
    alignment    contrastive projection heads for the two modalities
    training     teacher, alignment and student phases
    evaluation   seen-subject classification, N-shot identification, export
    cli          ``ppgkd`` command-line entry point
"""

__version__ = "0.1.0"
