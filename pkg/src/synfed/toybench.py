"""Shipped toy benchmark: blob segmentation under site-shifted distributions.

Each site draws bright elliptical blobs on a dark noisy background. Sites
differ in two ways that mimic inter-center distribution shift:

* blob position — site k places blobs around a center rotated to angle
  2πk/8 from the image center, so neighboring sites overlap spatially and
  distant sites barely do;
* foreground intensity — site k brightens blobs by 0.02k.

Two calibration dots (a black and a white pixel in the top-left corner of
every image) pin each image's dynamic range, so the per-image [0, 1]
re-normalization applied when stored datasets are loaded reproduces the
original intensities instead of stretching away the inter-site shift.

A model trained on one site's real data therefore carries a positional prior
that transfers poorly to distant sites, while pretraining on synthetic data
merged from several sites covers the union of blob regions. That is exactly
the directional effect the orchestration pipeline is supposed to surface,
at desk scale and in seconds.

The family is fixed at 8 sites; scaling studies take the first N of them so
site definitions stay stable across N.
"""

from __future__ import annotations

import numpy as np

from .core import Dataset, Image2D, PatientRecord, SegMask

FAMILY_SIZE = 8
IMAGE_SIZE = 32
DEFAULT_PATIENTS = 10
DEFAULT_IMAGES_PER_PATIENT = 2

_RING_RADIUS = 6.5          # distance of site blob centers from image center
_BLOB_RADIUS_RANGE = (3.5, 5.5)
_CENTER_JITTER = 2.0
_BASE_FOREGROUND = 0.70
_FOREGROUND_STEP = 0.02
_BACKGROUND = 0.20
_PIXEL_NOISE = 0.02


def site_name(site_index: int) -> str:
    return f"site-{chr(ord('a') + site_index)}"


def make_toy_site(site_index: int, seed: int = 0,
                  n_patients: int = DEFAULT_PATIENTS,
                  images_per_patient: int = DEFAULT_IMAGES_PER_PATIENT,
                  size: int = IMAGE_SIZE) -> Dataset:
    """One site's labeled dataset, deterministic in (site_index, seed)."""
    if not 0 <= site_index < FAMILY_SIZE:
        raise ValueError(f"site index must be in [0, {FAMILY_SIZE})")
    rng = np.random.default_rng([seed, 1009, site_index])
    angle = 2.0 * np.pi * site_index / FAMILY_SIZE
    base_center = (size / 2.0 + _RING_RADIUS * np.sin(angle),
                   size / 2.0 + _RING_RADIUS * np.cos(angle))
    foreground = _BASE_FOREGROUND + _FOREGROUND_STEP * site_index

    rows, cols = np.mgrid[0:size, 0:size]
    patients = []
    for p in range(n_patients):
        center = (base_center[0] + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER),
                  base_center[1] + rng.uniform(-_CENTER_JITTER, _CENTER_JITTER))
        radius_r = rng.uniform(*_BLOB_RADIUS_RANGE)
        radius_c = rng.uniform(*_BLOB_RADIUS_RANGE)
        items = []
        for _ in range(images_per_patient):
            rr = center[0] + rng.uniform(-0.5, 0.5)
            cc = center[1] + rng.uniform(-0.5, 0.5)
            inside = (((rows - rr) / radius_r) ** 2
                      + ((cols - cc) / radius_c) ** 2) <= 1.0
            pixels = np.where(inside, foreground, _BACKGROUND)
            pixels = pixels + rng.uniform(-_PIXEL_NOISE, _PIXEL_NOISE, size=pixels.shape)
            pixels = np.clip(pixels, 0.0, 1.0)
            # Calibration dots pin the dynamic range: loading an image
            # re-normalizes it to span [0, 1] per image, and without a fixed
            # black and white reference that stretch would erase the
            # intensity shift between sites.
            pixels[0, 0] = 0.0
            pixels[0, 1] = 1.0
            items.append((
                Image2D(pixels=pixels.astype(np.float32)),
                SegMask(labels=inside.astype(np.int32), num_classes=1),
            ))
        patients.append(PatientRecord(patient_id=f"p{p:03d}", items=tuple(items)))

    return Dataset(site_id=site_name(site_index), patients=tuple(patients),
                   modality="toy-blob", num_classes=1)


def make_toy_family(n_sites: int, seed: int = 0,
                    n_patients: int = DEFAULT_PATIENTS,
                    images_per_patient: int = DEFAULT_IMAGES_PER_PATIENT) -> dict[str, Dataset]:
    """The first n_sites members of the 8-site family, keyed by site id."""
    if not 1 <= n_sites <= FAMILY_SIZE:
        raise ValueError(f"n_sites must be in [1, {FAMILY_SIZE}]")
    sites = [make_toy_site(k, seed=seed, n_patients=n_patients,
                           images_per_patient=images_per_patient)
             for k in range(n_sites)]
    return {d.site_id: d for d in sites}
