"""Multi-site synthetic-data sharing pipeline for 2D segmentation.

Each site fingerprints its local dataset, derives architecture plans and
training budgets from the fingerprint alone, trains a generator and a
segmenter, filters generated images through a memorization gate, and
publishes a synthetic bundle. Bundles are merged centrally, a general
segmenter is pretrained on the merged data, and every site fine-tunes it
on local real data. No real image or real-data-trained parameter ever
leaves a site.
"""

__version__ = "0.1.0"
