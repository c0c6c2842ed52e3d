"""Detection-guided GAN image enhancement.

Submodules: nets (generator/discriminator), losses (objective terms),
detector (pluggable detection ports), datapipe (paired-corpus synthesis),
trainer (min-max loop with detection-loss placement modes), evalkit
(AP / penalized mean IoU / UIQM), cli (command-line surface).
"""

__version__ = "0.1.0"
